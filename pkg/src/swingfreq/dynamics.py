"""Swing dynamics in center-of-inertia coordinates.

The integrated system couples per-bus angles and frequency deviations with
the adaptive estimates of the active controller:

    d(delta_i)/dt = omega_i - mean(omega)
    M_i d(omega_i)/dt = p_i(t) - D_i omega_i - u_i - sum_j B_ij sin(delta_ij)
    d(ahat_i)/dt = omega_i * A_i phi_i(t)          (adaptive controllers)

with net injection p_i(t) = p_star_i + phi_i(t).a_i plus step disturbances
and optional per-step uniform noise.  The default integrator is classical
RK4 with the smooth basis evaluated at sub-stage times; explicit Euler is
available behind a flag and is what the training module differentiates
through.  Step injections and noise are held constant across one integration
step (zero-order hold anchored at the step start), so trajectories are
piecewise-smooth with breakpoints exactly on the recording grid.

Angles are re-projected to the COI gauge (zero mean) after every step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .controllers import Controller
from .netmodel import Network, grad_S, solve_equilibrium

__all__ = [
    "BasisSignal",
    "Disturbance",
    "IntegrationError",
    "SystemState",
    "Trajectory",
    "equilibrium_state",
    "make_constant_basis",
    "make_sinusoid_basis",
    "rollout",
    "step",
]


class IntegrationError(RuntimeError):
    """State became non-finite while integrating."""


@dataclass(frozen=True, eq=False)
class SystemState:
    """COI angles, frequency deviations, and adaptive estimates.

    `a_hat` has shape (n, l) where l is the controller's feature count;
    l = 0 for non-adaptive controllers.
    """

    delta: np.ndarray
    omega: np.ndarray
    a_hat: np.ndarray

    def __post_init__(self) -> None:
        for name in ("delta", "omega", "a_hat"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=float)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        n = self.delta.shape[0]
        if self.omega.shape != (n,) or self.a_hat.ndim != 2 or self.a_hat.shape[0] != n:
            raise ValueError("inconsistent state shapes")

    @property
    def n(self) -> int:
        return self.delta.shape[0]


@dataclass(frozen=True, eq=False)
class BasisSignal:
    """Per-bus feature vectors phi_i(k) = (sin(eta_i^1 k), ..., 1) over k = t/dt_ref.

    `eta` holds the sinusoid step-frequencies, one row per bus (zero columns
    for a constant-only basis); `coeffs` the true coefficients a_i, with the
    trailing column always belonging to the constant-1 feature.  The feature
    index k advances by 1 per `dt_ref` of simulated time regardless of the
    integration step, and is evaluated at fractional k for sub-stage times.
    """

    eta: np.ndarray
    coeffs: np.ndarray
    dt_ref: float = 0.01

    def __post_init__(self) -> None:
        eta = np.ascontiguousarray(self.eta, dtype=float)
        coeffs = np.ascontiguousarray(self.coeffs, dtype=float)
        if eta.ndim != 2 or coeffs.ndim != 2:
            raise ValueError("eta and coeffs must be 2-d")
        if coeffs.shape != (eta.shape[0], eta.shape[1] + 1):
            raise ValueError("coeffs must have one more column than eta (constant term)")
        if not np.all(np.isfinite(eta)) or not np.all(np.isfinite(coeffs)):
            raise ValueError("non-finite basis parameters")
        if not self.dt_ref > 0:
            raise ValueError("dt_ref must be positive")
        eta.flags.writeable = False
        coeffs.flags.writeable = False
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def n(self) -> int:
        return self.coeffs.shape[0]

    @property
    def n_features(self) -> int:
        return self.coeffs.shape[1]

    def features(self, t: float | np.ndarray) -> np.ndarray:
        """Evaluate phi at time(s) t; shape (..., n, n_features)."""
        k = np.asarray(t, dtype=float) / self.dt_ref
        out = np.empty(k.shape + (self.n, self.n_features))
        out[..., -1] = 1.0
        if self.eta.shape[1]:
            np.sin(k[..., None, None] * self.eta, out=out[..., :-1])
        return out

    def injection_variation(self, t: float | np.ndarray) -> np.ndarray:
        """phi_i(t) . a_i for each bus; shape (..., n)."""
        return (self.features(t) * self.coeffs).sum(axis=-1)


def make_sinusoid_basis(n: int, rng: int | np.random.Generator) -> BasisSignal:
    """Two random sinusoid features plus the constant: eta ~ U[0.005 pi, 0.02 pi]
    per step index, true coefficients ~ U[0.1, 0.2]."""
    gen = np.random.default_rng(rng)
    eta = gen.uniform(0.005 * np.pi, 0.02 * np.pi, (n, 2))
    coeffs = gen.uniform(0.1, 0.2, (n, 3))
    return BasisSignal(eta, coeffs)


def make_constant_basis(n: int, coeffs: np.ndarray | None = None) -> BasisSignal:
    """Constant-1 feature only; zero coefficients unless given."""
    c = np.zeros((n, 1)) if coeffs is None else np.asarray(coeffs, dtype=float).reshape(n, 1)
    return BasisSignal(np.zeros((n, 0)), c)


@dataclass(frozen=True, eq=False)
class Disturbance:
    """Additive step injections plus optional per-step uniform noise.

    Each step is (bus index, magnitude p.u., onset s) and persists to the end
    of the horizon.  Onsets are snapped to the nearest integration step;
    activation is by step index, so refining dt does not shift which interval
    a step lands on.  Noise is redrawn each integration step from
    U[-noise_eps, noise_eps] per bus and held for the step.
    """

    steps: tuple[tuple[int, float, float], ...] = ()
    noise_eps: float = 0.0
    seed: int = 0
    mag_cap: float = 1.0

    def __post_init__(self) -> None:
        steps = tuple((int(b), float(m), float(o)) for b, m, o in self.steps)
        object.__setattr__(self, "steps", steps)
        for bus, mag, onset in steps:
            if abs(mag) > self.mag_cap:
                raise ValueError(
                    f"step magnitude {mag} at bus {bus} exceeds cap {self.mag_cap}"
                )
            if onset < 0:
                raise ValueError("step onset must be nonnegative")
        if self.noise_eps < 0:
            raise ValueError("noise_eps must be nonnegative")

    def injection(self, n: int, t: float, dt: float) -> np.ndarray:
        """Active step injections for the integration step starting at t."""
        p = np.zeros(n)
        k = round(t / dt)
        for bus, mag, onset in self.steps:
            if not 0 <= bus < n:
                raise ValueError(f"step bus index {bus} out of range")
            if k >= round(onset / dt):
                p[bus] += mag
        return p

    def onset_indices(self, dt: float, n_steps: int) -> list[int]:
        """Interior record indices where a step switches on."""
        ks = {round(o / dt) for _, _, o in self.steps}
        return sorted(k for k in ks if 0 < k <= n_steps)


def equilibrium_state(
    net: Network, controller: Controller, delta_star: np.ndarray | None = None
) -> SystemState:
    """Default initial condition: equilibrium angles, zero deviation, zero estimates."""
    if delta_star is None:
        delta_star = solve_equilibrium(net)
    return SystemState(
        np.asarray(delta_star, dtype=float),
        np.zeros(net.n),
        np.zeros((net.n, controller.n_features)),
    )


def _derivs(
    net: Network,
    controller: Controller,
    basis: BasisSignal,
    delta: np.ndarray,
    omega: np.ndarray,
    a_hat: np.ndarray,
    t: float,
    p_extra: np.ndarray | float,
    phi: np.ndarray | None = None,
):
    if phi is None:
        phi = basis.features(t)
    p = net.p_star + (phi * basis.coeffs).sum(axis=-1) + p_extra
    view = controller.select_features(phi)
    u = controller.control(omega, view, a_hat if controller.n_features else None)
    # np.add.reduce(x)/x.size == x.mean() bit for bit, minus the wrapper cost
    d_delta = omega - np.add.reduce(omega) / omega.size
    d_omega = (p - net.D * omega - u - grad_S(net, delta)) / net.M
    if controller.n_features:
        d_a = controller.adaptation(omega, view)
    else:
        d_a = np.zeros_like(a_hat)
    return d_delta, d_omega, d_a, u, p


def _advance(net, controller, basis, state, t, dt, p_extra, method, k1=None):
    """One integration step; p_extra is held constant across sub-stages."""
    d, w, a = state.delta, state.omega, state.a_hat
    if k1 is None:
        k1 = _derivs(net, controller, basis, d, w, a, t, p_extra)
    if method == "euler":
        nd, nw, na = d + dt * k1[0], w + dt * k1[1], a + dt * k1[2]
    elif method == "rk4":
        h = dt / 2
        phih = basis.features(t + h)  # k2 and k3 sit at the same sub-stage time
        k2 = _derivs(net, controller, basis, d + h * k1[0], w + h * k1[1], a + h * k1[2], t + h, p_extra, phih)
        k3 = _derivs(net, controller, basis, d + h * k2[0], w + h * k2[1], a + h * k2[2], t + h, p_extra, phih)
        k4 = _derivs(net, controller, basis, d + dt * k3[0], w + dt * k3[1], a + dt * k3[2], t + dt, p_extra)
        sixth = dt / 6
        nd = d + sixth * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        nw = w + sixth * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        na = a + sixth * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    else:
        raise ValueError(f"unknown integration method {method!r}")
    return SystemState(nd - np.add.reduce(nd) / nd.size, nw, na)


def step(
    net: Network,
    state: SystemState,
    controller: Controller,
    basis: BasisSignal,
    dist: Disturbance | None = None,
    t: float = 0.0,
    dt: float = 0.01,
    *,
    method: str = "rk4",
    rng: np.random.Generator | None = None,
) -> SystemState:
    """Advance one integration step from time t.

    Noise requires an explicit generator (`rng`); without one only the step
    injections of `dist` apply.  Raises IntegrationError if the new state is
    not finite.
    """
    p_extra: np.ndarray | float = 0.0
    if dist is not None:
        p_extra = dist.injection(net.n, t, dt)
        if dist.noise_eps > 0 and rng is not None:
            p_extra = p_extra + rng.uniform(-dist.noise_eps, dist.noise_eps, net.n)
    new = _advance(net, controller, basis, state, t, dt, p_extra, method)
    if not (
        np.all(np.isfinite(new.delta))
        and np.all(np.isfinite(new.omega))
        and np.all(np.isfinite(new.a_hat))
    ):
        k = round(t / dt) + 1
        raise IntegrationError(f"non-finite state at step {k} (t={t + dt:.6g})")
    return new


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time-indexed record of a closed-loop run.

    Arrays all have K+1 rows for a K-step integration; `u` and `p` hold the
    control and realized injection anchoring the step that starts at each
    record time (the final row's values are those quantities evaluated at the
    horizon).  `meta` carries the scenario description for the JSON sidecar.
    """

    t: np.ndarray
    delta: np.ndarray
    omega: np.ndarray
    u: np.ndarray
    p: np.ndarray
    a_hat: np.ndarray
    dt: float
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.delta.shape[1]

    @property
    def n_records(self) -> int:
        return self.t.shape[0]

    def tail(self, t0: float) -> "Trajectory":
        """Drop records before t0 and restart the clock there."""
        k0 = int(np.searchsorted(self.t, t0 - 1e-9))
        if k0 >= self.n_records:
            raise ValueError(f"tail start {t0:g} is past the horizon {self.t[-1]:g}")
        return Trajectory(
            self.t[k0:] - self.t[k0],
            self.delta[k0:],
            self.omega[k0:],
            self.u[k0:],
            self.p[k0:],
            self.a_hat[k0:],
            self.dt,
            self.meta,
        )

    def write_csv(self, path: str | Path) -> None:
        """Header: t, then delta_<bus>, omega_<bus>, u_<bus>, p_<bus> blocks."""
        ids = self.meta.get("bus_ids", list(range(1, self.n + 1)))
        header = ["t"]
        for block in ("delta", "omega", "u", "p"):
            header += [f"{block}_{b}" for b in ids]
        table = np.column_stack([self.t, self.delta, self.omega, self.u, self.p])
        lines = [",".join(header)]
        for row in table:
            lines.append(",".join(repr(float(v)) for v in row))
        Path(path).write_text("\n".join(lines) + "\n")

    def write_meta(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.meta, indent=1, sort_keys=True) + "\n")


def rollout(
    net: Network,
    controller: Controller,
    basis: BasisSignal,
    dist: Disturbance | None = None,
    *,
    horizon: float,
    dt: float = 0.01,
    x0: SystemState | None = None,
    method: str = "rk4",
) -> Trajectory:
    """Integrate for horizon/dt steps and record every state.

    Deterministic given the disturbance seed.  The initial condition defaults
    to the no-disturbance equilibrium with zero estimates.
    """
    n_steps = round(horizon / dt)
    if abs(n_steps * dt - horizon) > 1e-9 * max(1.0, abs(horizon)) or n_steps < 1:
        raise ValueError(f"horizon {horizon} is not an integer multiple of dt {dt}")
    if basis.n != net.n:
        raise ValueError("basis bus count does not match the network")
    state = x0 if x0 is not None else equilibrium_state(net, controller)
    rng = None
    if dist is not None and dist.noise_eps > 0:
        rng = np.random.default_rng(dist.seed)

    n, l = net.n, controller.n_features
    t_rec = np.arange(n_steps + 1) * dt
    delta = np.empty((n_steps + 1, n))
    omega = np.empty((n_steps + 1, n))
    u_rec = np.empty((n_steps + 1, n))
    p_rec = np.empty((n_steps + 1, n))
    a_rec = np.empty((n_steps + 1, n, l))

    for k in range(n_steps + 1):
        t = k * dt
        p_extra: np.ndarray | float = 0.0
        if dist is not None:
            p_extra = dist.injection(n, t, dt)
            if rng is not None:
                p_extra = p_extra + rng.uniform(-dist.noise_eps, dist.noise_eps, n)
        k1 = _derivs(net, controller, basis, state.delta, state.omega, state.a_hat, t, p_extra)
        delta[k], omega[k], a_rec[k] = state.delta, state.omega, state.a_hat
        u_rec[k], p_rec[k] = k1[3], k1[4]
        if k == n_steps:
            break
        state = _advance(net, controller, basis, state, t, dt, p_extra, method, k1=k1)
        if not (
            np.all(np.isfinite(state.delta))
            and np.all(np.isfinite(state.omega))
            and np.all(np.isfinite(state.a_hat))
        ):
            raise IntegrationError(f"non-finite state at step {k + 1} (t={t + dt:.6g})")

    meta = {
        "bus_ids": None,
        "dt": dt,
        "horizon": float(horizon),
        "method": method,
        "seed": dist.seed if dist is not None else None,
        "noise_eps": dist.noise_eps if dist is not None else 0.0,
        "steps": [list(s) for s in dist.steps] if dist is not None else [],
        "basis": {
            "eta": basis.eta.tolist(),
            "coeffs": basis.coeffs.tolist(),
            "dt_ref": basis.dt_ref,
        },
    }
    meta["bus_ids"] = list(net.bus_ids)
    return Trajectory(t_rec, delta, omega, u_rec, p_rec, a_rec, dt, meta)
