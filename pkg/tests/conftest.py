import numpy as np
import pytest

from swingfreq.netmodel import Network, bundled_case_path, load_case, solve_equilibrium


@pytest.fixture(scope="session")
def two_bus():
    return load_case(bundled_case_path("two_bus"))


@pytest.fixture(scope="session")
def ne39():
    return load_case(bundled_case_path("ne39"))


@pytest.fixture(scope="session")
def ring3():
    # 3-bus ring, unit susceptances; equilibrium cross-checked offline by
    # brute-force minimization of S(d) - p.d over the COI plane.
    return Network(
        name="ring3",
        bus_ids=(1, 2, 3),
        M=np.ones(3),
        D=np.ones(3),
        p_star=np.array([0.3, -0.1, -0.2]),
        edges=((0, 1), (1, 2), (0, 2)),
        b_edge=np.ones(3),
    )


@pytest.fixture(scope="session")
def two_bus_eq(two_bus):
    return solve_equilibrium(two_bus)


@pytest.fixture(scope="session")
def ne39_eq(ne39):
    return solve_equilibrium(ne39)
