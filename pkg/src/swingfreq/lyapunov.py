"""Energy function, quadratic bounds, and trajectory-decrease certification.

The certified energy is

    V(delta, omega, ahat) = 1/2 sum_i M_i omega_i^2            (kinetic)
                          + W_p(delta)                          (potential)
                          + 1/2 sum_i (ahat_i - a_i)' A_i^-1 (ahat_i - a_i)

where W_p is the Bregman gap of the network potential S at the equilibrium
delta_star.  Within the operating region (every edge angle difference at
least `margin` away from pi/2) V is sandwiched between gamma1 and gamma2
times the squared distance to the equilibrium point, and along closed-loop
trajectories of a conforming controller dV/dt <= -sum_i D_i omega_i^2.

The gamma constants are assembled from eigenvalue bounds of the Hessian of S
restricted to the zero-mean subspace.  Because the Hessian is a Laplacian
whose edge weights B_e cos(delta_e) are bounded between B_e cos(pi/2-margin)
and B_e over the whole region, and Laplacians are monotone in their weights,
the extreme-weight eigensolves give bounds valid at every region point, not
just at sampled ones.  Sampled estimates are still computed as a cross-check
and reported alongside.

The decrease check differentiates V numerically.  Step disturbances switch
on at known record indices and are constant afterwards, so within each
inter-onset segment they are folded into the constant-feature coefficient
and the trajectory restricted to the segment solves a smooth ODE; V is
differenced per segment (central differences inside, second-order one-sided
stencils at segment ends), keeping the error O(dt^2) everywhere.  The
tolerance constant c in `tol = c * dt^2` comes from `fit_margin_constant`,
which measures the third derivative of V driving that stencil error.

Everything here needs the true basis coefficients, so this module is
simulation-side instrumentation: controllers never see it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .controllers import AdaptiveController, Controller
from .dynamics import BasisSignal, SystemState, Trajectory
from .netmodel import Network, hessian_S

__all__ = [
    "CertificationError",
    "DecreaseReport",
    "GammaBounds",
    "LyapunovEval",
    "MarginFit",
    "RoaEstimate",
    "certificate_report",
    "check_decrease",
    "compute_gammas",
    "estimate_roa",
    "eval_V",
    "eval_Wp",
    "fit_margin_constant",
]


class CertificationError(RuntimeError):
    """Certification could not be carried out on the given inputs."""


@dataclass(frozen=True)
class LyapunovEval:
    """Energy components at one state; V = kinetic + Wp + est_err exactly."""

    V: float
    Wp: float
    kinetic: float
    est_err: float


@dataclass(frozen=True)
class GammaBounds:
    """Quadratic sandwich constants over the margin region.

    beta1/beta2 are the rigorous extreme-weight Laplacian bounds; the
    *_sampled values are the min/max over `samples` random region points,
    kept as a consistency check (sampled bounds can only be tighter).
    """

    gamma1: float
    gamma2: float
    beta1: float
    beta2: float
    beta1_sampled: float
    beta2_sampled: float
    margin: float
    samples: int


@dataclass(frozen=True)
class RoaEstimate:
    """Certified sublevel set: ball radius r, level rho, membership via gamma2."""

    r: float
    rho: float
    gamma1: float
    gamma2: float
    margin: float
    valid: bool

    def contains(
        self,
        state: SystemState,
        delta_star: np.ndarray,
        coeffs_true: np.ndarray | None = None,
    ) -> bool:
        """Conservative membership test: gamma2 * ||x||^2 <= rho."""
        s = float(((state.delta - delta_star) ** 2).sum() + (state.omega**2).sum())
        if state.a_hat.size:
            if coeffs_true is None:
                raise ValueError("coeffs_true required for adaptive states")
            s += float(((state.a_hat - coeffs_true) ** 2).sum())
        return self.gamma2 * s <= self.rho


@dataclass(frozen=True)
class DecreaseReport:
    """Outcome of the discrete energy-decrease check along one trajectory."""

    worst_margin: float
    worst_time: float
    tol: float
    tol_coeff: float
    dt: float
    passed: bool
    n_points: int
    n_segments: int

    def to_dict(self) -> dict:
        return {
            "worst_margin": self.worst_margin,
            "worst_time": self.worst_time,
            "tol": self.tol,
            "tol_coeff": self.tol_coeff,
            "dt": self.dt,
            "passed": self.passed,
            "n_points": self.n_points,
            "n_segments": self.n_segments,
        }


@dataclass(frozen=True)
class MarginFit:
    """Fitted tolerance constant for the decrease check."""

    tol_coeff: float
    v3_max: float
    safety: float
    raw_worst: dict


def eval_Wp(net: Network, delta: np.ndarray, delta_star: np.ndarray) -> np.ndarray:
    """Bregman gap of S at delta_star, in the per-edge cosine form; batched."""
    d = net.edge_differences(delta)
    d0 = net.edge_differences(delta_star)
    return (net.b_edge * (np.cos(d0) - np.cos(d) + np.sin(d0) * (d0 - d))).sum(axis=-1)


def _est_err(
    a_hat: np.ndarray, coeffs_true: np.ndarray, rates: np.ndarray
) -> np.ndarray:
    err = a_hat - coeffs_true
    return 0.5 * (err * err / rates).sum(axis=(-2, -1))


def eval_V(
    net: Network,
    state: SystemState,
    basis: BasisSignal,
    controller: Controller,
    delta_star: np.ndarray,
    *,
    coeffs_true: np.ndarray | None = None,
) -> LyapunovEval:
    """All energy components at one state.

    For adaptive controllers the estimation error is measured against the
    controller's view of the true coefficients (override with `coeffs_true`
    when step disturbances have been folded into the constant feature).
    Non-adaptive controllers contribute no estimation term.
    """
    kinetic = float(0.5 * (net.M * state.omega**2).sum())
    wp = float(eval_Wp(net, state.delta, delta_star))
    est = 0.0
    if isinstance(controller, AdaptiveController):
        if coeffs_true is None:
            coeffs_true = controller.select_features(basis.coeffs)
        if coeffs_true.shape != state.a_hat.shape:
            raise ValueError(
                f"estimate/coefficient shape mismatch: {state.a_hat.shape} vs "
                f"{coeffs_true.shape}"
            )
        est = float(_est_err(state.a_hat, coeffs_true, controller.rates))
    return LyapunovEval(V=kinetic + wp + est, Wp=wp, kinetic=kinetic, est_err=est)


def compute_gammas(
    net: Network,
    controller: Controller | None = None,
    *,
    margin: float = 0.01,
    samples: int = 10_000,
    rng: int | np.random.Generator = 0,
) -> GammaBounds:
    """Sandwich constants over the region max|delta_ij| <= pi/2 - margin.

    gamma1 = 1/2 min(min_i M_i, 2 beta1, 1/max A entries) and gamma2 the
    matching max with 1/min A; the adaptation terms drop out for
    non-adaptive controllers.  Raises CertificationError when the region is
    empty or the bounds degenerate.
    """
    if not 0 < margin < np.pi / 2:
        raise CertificationError("margin must lie strictly between 0 and pi/2")
    bound = np.pi / 2 - margin
    lap = hessian_S(net, np.zeros(net.n))
    evals = np.linalg.eigvalsh(lap)
    lam_min = evals[1] if net.n > 1 else 0.0
    lam_max = evals[-1]
    cmin = np.cos(bound)
    beta1 = 0.5 * cmin * lam_min
    beta2 = 0.5 * lam_max
    if beta1 <= 0:
        raise CertificationError(
            "region bound produced beta1 <= 0 (disconnected graph or margin ~ 0); "
            "reduce the region or check the case"
        )

    gen = np.random.default_rng(rng)
    half = bound / 2
    b1s, b2s = np.inf, -np.inf
    for _ in range(int(samples)):
        delta = gen.uniform(-half, half, net.n)
        ev = np.linalg.eigvalsh(hessian_S(net, delta - delta.mean()))
        b1s = min(b1s, 0.5 * (ev[1] if net.n > 1 else 0.0))
        b2s = max(b2s, 0.5 * ev[-1])

    terms_lo = [net.M.min(), 2 * beta1]
    terms_hi = [net.M.max(), 2 * beta2]
    if isinstance(controller, AdaptiveController):
        rates = controller.rates
        terms_lo.append(1.0 / rates.max())
        terms_hi.append(1.0 / rates.min())
    gamma1 = 0.5 * min(terms_lo)
    gamma2 = 0.5 * max(terms_hi)
    return GammaBounds(
        gamma1=float(gamma1),
        gamma2=float(gamma2),
        beta1=float(beta1),
        beta2=float(beta2),
        beta1_sampled=float(b1s),
        beta2_sampled=float(b2s),
        margin=margin,
        samples=int(samples),
    )


def _segments(traj: Trajectory) -> list[tuple[int, int, dict[int, float]]]:
    """Split record indices at step onsets.

    Returns (start, end, active) triples covering [0, K]; `active` maps bus
    index to the total step injection switched on at or before `start`.
    """
    n_steps = traj.n_records - 1
    steps = [tuple(s) for s in traj.meta.get("steps", [])]
    onsets = sorted(
        {round(o / traj.dt) for _, _, o in steps if 0 < round(o / traj.dt) <= n_steps}
    )
    bounds = [0, *onsets, n_steps]
    out = []
    for s, e in zip(bounds[:-1], bounds[1:]):
        active: dict[int, float] = {}
        for bus, mag, onset in steps:
            if round(onset / traj.dt) <= s:
                active[int(bus)] = active.get(int(bus), 0.0) + mag
        out.append((s, e, active))
    return out


def _v_series(
    traj: Trajectory,
    net: Network,
    basis: BasisSignal,
    controller: Controller,
    delta_star: np.ndarray,
    start: int,
    end: int,
    active: dict[int, float],
) -> np.ndarray:
    """V at records start..end with active steps folded into the constant feature."""
    sl = slice(start, end + 1)
    kinetic = 0.5 * (net.M * traj.omega[sl] ** 2).sum(axis=-1)
    wp = eval_Wp(net, traj.delta[sl], delta_star)
    if not isinstance(controller, AdaptiveController):
        return kinetic + wp
    coeffs = np.array(controller.select_features(basis.coeffs))
    for bus, mag in active.items():
        coeffs[bus, -1] += mag
    est = _est_err(traj.a_hat[sl], coeffs, controller.rates)
    return kinetic + wp + est


def _segment_dv(v: np.ndarray, dt: float) -> np.ndarray:
    """Second-order dV/dt on a segment: central inside, one-sided at the ends."""
    if v.size < 3:
        return np.full(v.shape, np.nan)
    dv = np.empty_like(v)
    dv[1:-1] = (v[2:] - v[:-2]) / (2 * dt)
    dv[0] = (-3 * v[0] + 4 * v[1] - v[2]) / (2 * dt)
    dv[-1] = (3 * v[-1] - 4 * v[-2] + v[-3]) / (2 * dt)
    return dv


def check_decrease(
    traj: Trajectory,
    net: Network,
    basis: BasisSignal,
    controller: Controller,
    delta_star: np.ndarray,
    *,
    tol_coeff: float,
) -> DecreaseReport:
    """Assert dV/dt <= -sum_i D_i omega_i^2 along a noise-free trajectory.

    The margin at each record is the numerical dV/dt plus the damping
    dissipation; a conforming controller keeps every margin below
    tol_coeff * dt^2.  A violation beyond that signals a controller outside
    the certified class (or a tolerance constant fitted at the wrong dt).
    """
    if traj.meta.get("noise_eps", 0.0):
        raise ValueError("decrease check requires a noise-free trajectory")
    worst = -np.inf
    worst_time = 0.0
    n_points = 0
    segs = _segments(traj)
    for start, end, active in segs:
        v = _v_series(traj, net, basis, controller, delta_star, start, end, active)
        dv = _segment_dv(v, traj.dt)
        w0 = (net.D * traj.omega[start : end + 1] ** 2).sum(axis=-1)
        margin = dv + w0
        ok = ~np.isnan(margin)
        n_points += int(ok.sum())
        if ok.any():
            k = int(np.nanargmax(margin))
            if margin[k] > worst:
                worst = float(margin[k])
                worst_time = float(traj.t[start + k])
    if n_points == 0:
        raise ValueError("trajectory too short for the decrease check")
    tol = tol_coeff * traj.dt**2
    return DecreaseReport(
        worst_margin=worst,
        worst_time=worst_time,
        tol=float(tol),
        tol_coeff=float(tol_coeff),
        dt=traj.dt,
        passed=bool(worst <= tol),
        n_points=n_points,
        n_segments=len(segs),
    )


def fit_margin_constant(
    trajectories: list[Trajectory],
    net: Network,
    bases: list[BasisSignal],
    controller: Controller,
    delta_star: np.ndarray,
    *,
    safety: float = 4.0,
) -> MarginFit:
    """Calibrate the decrease-check tolerance from trajectory data.

    Both difference stencils used by `check_decrease` have error bounded by
    (dt^2 / 3) |V'''|, so the constant is safety * max|V'''| / 3 with V'''
    estimated by third differences of the segment-folded energy series.
    Calibrating on trajectories other than the ones under test keeps the
    tolerance independent of the check it feeds.
    """
    v3 = 0.0
    raw_worst: dict = {}
    for idx, (traj, basis) in enumerate(zip(trajectories, bases)):
        if traj.meta.get("noise_eps", 0.0):
            raise ValueError("tolerance calibration requires noise-free trajectories")
        dt = traj.dt
        worst = -np.inf
        for start, end, active in _segments(traj):
            v = _v_series(traj, net, basis, controller, delta_star, start, end, active)
            if v.size >= 5:
                d3 = (v[4:] - 2 * v[3:-1] + 2 * v[1:-3] - v[:-4]) / (2 * dt**3)
                v3 = max(v3, float(np.abs(d3).max()))
            dv = _segment_dv(v, dt)
            w0 = (net.D * traj.omega[start : end + 1] ** 2).sum(axis=-1)
            m = dv + w0
            if (~np.isnan(m)).any():
                worst = max(worst, float(np.nanmax(m)))
        raw_worst[idx] = worst
    if v3 == 0.0:
        raise CertificationError("calibration trajectories too short to fit a tolerance")
    return MarginFit(
        tol_coeff=float(safety * v3 / 3.0),
        v3_max=float(v3),
        safety=float(safety),
        raw_worst=raw_worst,
    )


def estimate_roa(
    net: Network,
    bounds: GammaBounds,
    delta_star: np.ndarray,
    *,
    margin_frac: float = 0.1,
) -> RoaEstimate:
    """Largest certified ball and sublevel set around the equilibrium.

    A ball of radius r in the joint (delta - delta_star, omega, ahat - a)
    space keeps every edge difference within the margin region as long as
    sqrt(2) r plus the equilibrium spread stays below pi/2 - margin; the
    level rho = gamma1 r^2 (1 - margin_frac) then sits strictly below the
    lower quadratic bound on the ball boundary.
    """
    d0 = np.abs(net.edge_differences(delta_star)).max() if net.n_edges else 0.0
    r = (np.pi / 2 - bounds.margin - d0) / np.sqrt(2.0)
    rho = bounds.gamma1 * r**2 * (1.0 - margin_frac)
    valid = bool(r > 0 and rho > 0)
    return RoaEstimate(
        r=float(r),
        rho=float(rho) if valid else 0.0,
        gamma1=bounds.gamma1,
        gamma2=bounds.gamma2,
        margin=bounds.margin,
        valid=valid,
    )


def certificate_report(
    bounds: GammaBounds, decrease: DecreaseReport, roa: RoaEstimate
) -> dict:
    """Assemble the JSON-ready certification summary."""
    return {
        "gamma1": bounds.gamma1,
        "gamma2": bounds.gamma2,
        "beta1": bounds.beta1,
        "beta2": bounds.beta2,
        "beta1_sampled": bounds.beta1_sampled,
        "beta2_sampled": bounds.beta2_sampled,
        "margin": bounds.margin,
        "samples": bounds.samples,
        "worst_margin": decrease.worst_margin,
        "worst_time": decrease.worst_time,
        "tol": decrease.tol,
        "roa": {"r": roa.r, "rho": roa.rho, "valid": roa.valid},
        "pass": bool(decrease.passed and roa.valid),
    }
