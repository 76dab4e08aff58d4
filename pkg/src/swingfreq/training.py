"""Scenario generation, transient loss, trajectory gradients, and training.

The transient loss of one closed-loop trajectory is

    loss = sum_i ( max_k |omega_i(k)| + gamma * c_i * dt * sum_{k<K} u_i(k)^2 )

and training minimizes its batch average by gradient descent on the raw
(unconstrained) controller parameters.  Gradients are exact reverse-mode
derivatives of the discretized rollout: the forward pass is explicit Euler
at the reference step (the cadence the basis signals are defined over), the
backward pass walks the same recurrence with hand-written vector-Jacobian
products for every term: network coupling via Hessian-vector products,
controller terms via the hooks the controllers expose.  The max is handled
as a hard max with the subgradient placed at the earliest maximizing
sample; a log-sum-exp softening is available behind a flag.  Certification
and evaluation use the RK4 path in `dynamics`; the Euler engine here exists
to keep the adjoint exact and the memory linear in the horizon.

Everything is deterministic given the seeds: scenario draws come from
spawned `SeedSequence` children, and the per-epoch shuffle is keyed by
(seed, epoch) so a resumed run replays the exact batch order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .controllers import (
    AdaptiveController,
    Controller,
    ControllerError,
    SaturatedController,
    _dot_last,
)
from .dynamics import (
    BasisSignal,
    Disturbance,
    IntegrationError,
    SystemState,
    Trajectory,
    make_sinusoid_basis,
)
from .netmodel import Network, solve_equilibrium

__all__ = [
    "AdamState",
    "CostSpec",
    "GradientCheckReport",
    "Scenario",
    "ScenarioSet",
    "TrainReport",
    "batch_loss",
    "grad_loss",
    "gradient_check",
    "make_cost_spec",
    "make_scenario_set",
    "make_scenarios",
    "restoration_cost",
    "train",
    "transient_loss",
]

SMOOTH_MAX_TEMP = 100.0


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Action-cost weight gamma, per-bus quadratic coefficients, loss horizon."""

    gamma: float
    c: np.ndarray
    T: float

    def __post_init__(self) -> None:
        c = np.ascontiguousarray(self.c, dtype=float)
        if self.gamma < 0 or self.T <= 0 or np.any(c <= 0):
            raise ValueError("CostSpec requires gamma >= 0, c > 0, T > 0")
        c.flags.writeable = False
        object.__setattr__(self, "c", c)


def make_cost_spec(
    net: Network,
    rng: int | np.random.Generator | np.random.SeedSequence,
    *,
    gamma: float = 0.1,
    c_range: tuple[float, float] = (0.025, 0.075),
    T: float = 4.0,
) -> CostSpec:
    """Draw the per-bus action-cost coefficients once for a network."""
    gen = np.random.default_rng(rng)
    return CostSpec(gamma=gamma, c=gen.uniform(*c_range, net.n), T=T)


@dataclass(frozen=True, eq=False)
class Scenario:
    """One disturbance realization: step/noise injections, net-load basis,
    and an optional initial state (defaults to the undisturbed equilibrium)."""

    dist: Disturbance
    basis: BasisSignal
    x0: SystemState | None = None


@dataclass(frozen=True, eq=False)
class ScenarioSet:
    """Disjoint train/test scenario draws from one master seed."""

    train: tuple[Scenario, ...]
    test: tuple[Scenario, ...]
    seed: int


def make_scenarios(
    net: Network,
    count: int,
    seed: int | np.random.SeedSequence,
    *,
    noise_eps: float = 0.0,
    onset: float = 0.0,
    max_buses: int = 3,
    mag_cap: float = 1.0,
) -> tuple[Scenario, ...]:
    """Random disturbance scenarios: 1..max_buses step buses with magnitudes
    U[-mag_cap, mag_cap] switching on at `onset`, fresh sinusoid basis each."""
    if count < 1:
        raise ValueError("count must be >= 1")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    out = []
    for child in ss.spawn(count):
        gen = np.random.default_rng(child)
        n_buses = int(gen.integers(1, min(max_buses, net.n) + 1))
        buses = gen.choice(net.n, size=n_buses, replace=False)
        mags = gen.uniform(-mag_cap, mag_cap, n_buses)
        basis = make_sinusoid_basis(net.n, gen)
        dist = Disturbance(
            steps=tuple((int(b), float(m), float(onset)) for b, m in zip(buses, mags)),
            noise_eps=noise_eps,
            seed=int(gen.integers(0, 2**63 - 1)),
            mag_cap=mag_cap,
        )
        out.append(Scenario(dist=dist, basis=basis))
    return tuple(out)


def make_scenario_set(
    net: Network, n_train: int, n_test: int, seed: int, **kwargs
) -> ScenarioSet:
    ss = np.random.SeedSequence(seed)
    train_ss, test_ss = ss.spawn(2)
    return ScenarioSet(
        train=make_scenarios(net, n_train, train_ss, **kwargs),
        test=make_scenarios(net, n_test, test_ss, **kwargs),
        seed=seed,
    )


def transient_loss(traj: Trajectory, cost: CostSpec) -> float:
    """Per-bus worst deviation plus the action integral over [0, T].

    The sup norm is taken over all recorded samples up to T inclusive; the
    integral is a left Riemann sum, so the record at T contributes no action.
    """
    k_end = round(cost.T / traj.dt)
    if k_end < 1 or k_end > traj.n_records - 1:
        raise ValueError(
            f"trajectory covers {traj.t[-1]:g} s but the cost horizon is {cost.T:g} s"
        )
    peak = np.abs(traj.omega[: k_end + 1]).max(axis=0)
    action = (traj.u[:k_end] ** 2).sum(axis=0) * traj.dt
    return float(peak.sum() + cost.gamma * (cost.c * action).sum())


def restoration_cost(
    traj: Trajectory, window: tuple[float, float] = (10.0, 15.0)
) -> float:
    """Mean |omega| over all buses and records with window[0] <= t <= window[1]."""
    w0, w1 = window
    if w1 > traj.t[-1] + 1e-9:
        raise ValueError(
            f"trajectory ends at {traj.t[-1]:g} s, before the window end {w1:g} s"
        )
    mask = (traj.t >= w0 - 1e-9) & (traj.t <= w1 + 1e-9)
    return float(np.abs(traj.omega[mask]).mean())


# --- batched Euler engine ---------------------------------------------------


class _Batch:
    """Stacked scenario arrays for one forward/backward sweep.

    The basis features and the scheduled net injection are identical across
    epochs for a given step grid, so they are materialized once here instead
    of being recomputed twice per step by the forward and adjoint sweeps.
    """

    def __init__(
        self,
        net: Network,
        controller: Controller,
        scenarios: Sequence[Scenario],
        dt: float,
        n_steps: int,
        delta_star: np.ndarray | None,
    ):
        if isinstance(controller, SaturatedController):
            raise ControllerError("training through saturation is not supported")
        B = len(scenarios)
        if B == 0:
            raise ValueError("empty scenario batch")
        lb = scenarios[0].basis.n_features
        dt_ref = scenarios[0].basis.dt_ref
        for s in scenarios:
            if s.basis.n != net.n:
                raise ValueError("scenario basis does not match the network")
            if s.basis.n_features != lb or s.basis.dt_ref != dt_ref:
                raise ValueError("scenarios in a batch must share the basis layout")
        self.B, self.n, self.lb = B, net.n, lb
        self.dt, self.dt_ref, self.n_steps = dt, dt_ref, n_steps
        self.eta = np.stack([s.basis.eta for s in scenarios])
        self.coeffs = np.stack([s.basis.coeffs for s in scenarios])
        # step injections: already-on steps in p0, later ones as indexed events
        self.p0 = np.zeros((B, self.n))
        self.events: dict[int, list[tuple[int, int, float]]] = {}
        for b, s in enumerate(scenarios):
            for bus, mag, onset in s.dist.steps:
                if not 0 <= bus < net.n:
                    raise ValueError(f"step bus index {bus} out of range")
                k_on = round(onset / dt)
                if k_on <= 0:
                    self.p0[b, bus] += mag
                else:
                    self.events.setdefault(k_on, []).append((b, int(bus), mag))
        # per-step noise, drawn exactly as the sequential rollout draws it
        self.noise = None
        if any(s.dist.noise_eps > 0 for s in scenarios):
            self.noise = np.zeros((n_steps, B, self.n))
            for b, s in enumerate(scenarios):
                if s.dist.noise_eps > 0:
                    gen = np.random.default_rng(s.dist.seed)
                    draws = gen.uniform(
                        -s.dist.noise_eps, s.dist.noise_eps, (n_steps + 1, self.n)
                    )
                    self.noise[:, b] = draws[:n_steps]
        # initial conditions
        if any(s.x0 is None for s in scenarios) and delta_star is None:
            delta_star = solve_equilibrium(net)
        l_ctrl = controller.n_features
        self.delta0 = np.empty((B, self.n))
        self.omega0 = np.zeros((B, self.n))
        self.a0 = np.zeros((B, self.n, l_ctrl))
        for b, s in enumerate(scenarios):
            if s.x0 is None:
                self.delta0[b] = delta_star
            else:
                self.delta0[b] = s.x0.delta
                self.omega0[b] = s.x0.omega
                if s.x0.a_hat.shape == (self.n, l_ctrl):
                    self.a0[b] = s.x0.a_hat
                elif s.x0.a_hat.size:
                    raise ValueError("initial estimates do not fit the controller")
        # feature and injection schedules for every step; steps already on at
        # k = 0 fold into the schedule unless a later event has to re-branch it
        kidx = np.arange(n_steps) * dt / dt_ref
        self.phi = np.empty((n_steps, B, self.n, lb))
        self.phi[..., -1] = 1.0
        if self.eta.shape[-1]:
            np.sin(kidx[:, None, None, None] * self.eta, out=self.phi[..., :-1])
        self.p_sched = net.p_star + _dot_last(self.phi, self.coeffs)
        if not self.events:
            self.p_sched = self.p_sched + self.p0

    def p_extra(self, base: np.ndarray, k: int) -> np.ndarray:
        if k in self.events:
            base = base.copy()
            for b, bus, mag in self.events[k]:
                base[b, bus] += mag
        return base


def _grad_S_batch(net: Network, delta: np.ndarray) -> np.ndarray:
    ei, ej = net._edge_index()
    flows = net.b_edge * np.sin(delta[..., ei] - delta[..., ej])
    return flows @ net.incidence


def _hvp_batch(net: Network, delta: np.ndarray, v: np.ndarray) -> np.ndarray:
    ei, ej = net._edge_index()
    w = net.b_edge * np.cos(delta[..., ei] - delta[..., ej])
    return (w * (v[..., ei] - v[..., ej])) @ net.incidence


def _forward(net, controller, batch: _Batch, keep_cache: bool = False):
    """Euler rollout over the whole batch, keeping the histories the adjoint needs.

    With keep_cache the per-step controller caches (piecewise-linear segment
    overlaps) come back too, so the adjoint sweep does not recompute them.
    """
    K, B, n = batch.n_steps, batch.B, batch.n
    adaptive = isinstance(controller, AdaptiveController)
    view = controller.select_features(batch.phi) if adaptive else None
    delta_h = np.empty((K + 1, B, n))
    omega_h = np.empty((K + 1, B, n))
    u_h = np.empty((K, B, n))
    caches = [None] * K if keep_cache else None
    delta, omega, a_hat = batch.delta0.copy(), batch.omega0.copy(), batch.a0.copy()
    events = batch.events
    p_now = batch.p0 if events else None
    p_sched, noise = batch.p_sched, batch.noise
    D, M = net.D, net.M
    dt = batch.dt
    # np.add.reduce(x, -1)/n == x.mean(-1) bit for bit, minus the wrapper cost
    rsum = np.add.reduce
    for k in range(K):
        delta_h[k], omega_h[k] = delta, omega
        if events and k in events:
            p_now = batch.p_extra(p_now, k)
        u, cache = controller.control_cached(
            omega, view[k] if adaptive else None, a_hat if adaptive else None
        )
        u_h[k] = u
        if caches is not None:
            caches[k] = cache
        p = p_sched[k] if p_now is None else p_sched[k] + p_now
        if noise is not None:
            p = p + noise[k]
        d_omega = (p - D * omega - u - _grad_S_batch(net, delta)) / M
        new_delta = delta + dt * (omega - rsum(omega, -1, keepdims=True) / n)
        delta = new_delta - rsum(new_delta, -1, keepdims=True) / n
        if adaptive:
            a_hat = a_hat + dt * controller.adaptation(omega, view[k])
        omega = omega + dt * d_omega
        if not (np.isfinite(delta).all() and np.isfinite(omega).all()):
            raise IntegrationError(f"non-finite state at step {k + 1}")
    delta_h[K], omega_h[K] = delta, omega
    return delta_h, omega_h, u_h, caches


def _loss_terms(omega_h, u_h, cost: CostSpec, dt, smooth_max: bool):
    """Batch-mean loss plus the loss seeds on the omega and u histories."""
    K1, B, n = omega_h.shape
    absw = np.abs(omega_h)
    if smooth_max:
        m = absw.max(axis=0)
        z = np.exp(SMOOTH_MAX_TEMP * (absw - m))
        zsum = z.sum(axis=0)
        peak = m + np.log(zsum) / SMOOTH_MAX_TEMP
        seed_w = np.sign(omega_h) * z / zsum / B
    else:
        kstar = absw.argmax(axis=0)  # earliest maximizer
        peak = np.take_along_axis(absw, kstar[None], axis=0)[0]
        ks = np.arange(K1)[:, None, None]
        seed_w = (ks == kstar) * np.sign(omega_h) / B
    action = (u_h**2).sum(axis=0) * dt
    loss_b = peak.sum(axis=-1) + cost.gamma * (cost.c * action).sum(axis=-1)
    seed_u = 2.0 * cost.gamma * cost.c * u_h * dt / B
    return float(loss_b.mean()), seed_w, seed_u


def _backward(net, controller, batch: _Batch, delta_h, omega_h, seed_w, seed_u, caches=None):
    """Adjoint sweep of the Euler recurrence; returns the raw-parameter gradient."""
    K, n = batch.n_steps, batch.n
    adaptive = isinstance(controller, AdaptiveController)
    view = controller.select_features(batch.phi) if adaptive else None
    grad = np.zeros(controller.raw_parameters().size)
    lam_d = np.zeros((batch.B, batch.n))
    lam_w = seed_w[K].copy()
    lam_a = np.zeros((batch.B, batch.n, controller.n_features))
    dt = batch.dt
    ndt = -dt
    dtD = dt * net.D
    M = net.M
    rsum = np.add.reduce
    for k in range(K - 1, -1, -1):
        delta, omega = delta_h[k], omega_h[k]
        # the zero-mean projection is symmetric and idempotent, so both the
        # delta->delta and omega->delta branches pull back through it once
        lam_dp = lam_d - rsum(lam_d, -1, keepdims=True) / n
        g_m = lam_w / M
        bar_u = ndt * g_m + seed_u[k]
        new_lam_d = lam_dp - dt * _hvp_batch(net, delta, g_m)
        new_lam_w = (
            lam_w
            + seed_w[k]
            + dt * lam_dp
            - dtD * g_m
            + bar_u * controller.control_wrt_omega(omega)
        )
        grad += controller.control_vjp_raw(
            omega, bar_u, caches[k] if caches is not None else None
        )
        if adaptive:
            g_a, bar_w = controller.adaptation_vjp(omega, view[k], dt * lam_a)
            grad += g_a
            new_lam_w += bar_w
            lam_a = lam_a + controller.control_vjp_ahat(view[k], bar_u)
        lam_d, lam_w = new_lam_d, new_lam_w
        if not np.isfinite(lam_w).all():
            raise IntegrationError(f"non-finite adjoint at step {k}")
    return grad


def _cost_steps(cost: CostSpec, dt: float) -> int:
    n_steps = round(cost.T / dt)
    if n_steps < 1 or abs(n_steps * dt - cost.T) > 1e-9:
        raise ValueError(f"cost horizon {cost.T} is not an integer multiple of dt {dt}")
    return n_steps


def batch_loss(
    net: Network,
    controller: Controller,
    scenarios: Sequence[Scenario],
    cost: CostSpec,
    *,
    dt: float = 0.01,
    smooth_max: bool = False,
    delta_star: np.ndarray | None = None,
) -> float:
    """Batch-mean transient loss of the Euler-discretized closed loop."""
    n_steps = _cost_steps(cost, dt)
    batch = _Batch(net, controller, scenarios, dt, n_steps, delta_star)
    _, omega_h, u_h, _ = _forward(net, controller, batch)
    return _loss_terms(omega_h, u_h, cost, dt, smooth_max)[0]


def grad_loss(
    net: Network,
    controller: Controller,
    scenarios: Scenario | Sequence[Scenario],
    cost: CostSpec,
    *,
    dt: float = 0.01,
    smooth_max: bool = False,
    delta_star: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Loss and its exact gradient with respect to the raw parameter vector.

    Raises IntegrationError (with the step index) if the forward state or the
    adjoint sweep produces non-finite values.
    """
    if isinstance(scenarios, Scenario):
        scenarios = [scenarios]
    n_steps = _cost_steps(cost, dt)
    batch = _Batch(net, controller, scenarios, dt, n_steps, delta_star)
    # overflow here is a divergence signal, not a bug: it surfaces as
    # IntegrationError and the training loop falls back to good parameters
    with np.errstate(over="ignore", invalid="ignore"):
        delta_h, omega_h, u_h, caches = _forward(net, controller, batch, keep_cache=True)
        loss, seed_w, seed_u = _loss_terms(omega_h, u_h, cost, dt, smooth_max)
        grad = _backward(
            net, controller, batch, delta_h, omega_h, seed_w, seed_u, caches
        )
    if not np.all(np.isfinite(grad)):
        raise IntegrationError("non-finite gradient in the adjoint sweep")
    return loss, grad


# --- optimizer and training loop --------------------------------------------


@dataclass
class AdamState:
    """First/second moment accumulators for Adam."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)

    def update(
        self,
        raw: np.ndarray,
        grad: np.ndarray,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> np.ndarray:
        self.t += 1
        self.m = beta1 * self.m + (1 - beta1) * grad
        self.v = beta2 * self.v + (1 - beta2) * grad**2
        mhat = self.m / (1 - beta1**self.t)
        vhat = self.v / (1 - beta2**self.t)
        return raw - lr * mhat / (np.sqrt(vhat) + eps)

    def to_dict(self) -> dict:
        return {"m": self.m.tolist(), "v": self.v.tolist(), "t": self.t}

    @classmethod
    def from_dict(cls, doc: dict) -> "AdamState":
        return cls(
            np.array(doc["m"], dtype=float), np.array(doc["v"], dtype=float), int(doc["t"])
        )


@dataclass(frozen=True, eq=False)
class TrainReport:
    """Loss curve, final controller, optimizer state, and the run configuration."""

    controller: Controller
    losses: tuple[float, ...]
    config: dict
    optimizer: AdamState
    aborted: bool
    version: str = __version__

    def to_dict(self) -> dict:
        return {
            "losses": list(self.losses),
            "config": self.config,
            "aborted": self.aborted,
            "version": self.version,
        }


def train(
    net: Network,
    controller: Controller,
    scenarios: Sequence[Scenario],
    cost: CostSpec,
    *,
    epochs: int,
    batch_size: int = 25,
    lr: float = 1e-3,
    seed: int = 0,
    dt: float = 0.01,
    smooth_max: bool = False,
    optimizer: AdamState | None = None,
    start_epoch: int = 0,
    divergence_factor: float = 1e4,
    callback: Callable[[int, float], None] | None = None,
) -> TrainReport:
    """Adam on the raw parameters over shuffled mini-batches.

    The shuffle for epoch e is keyed by (seed, e), so resuming from a
    checkpoint (same seed, `start_epoch` advanced, optimizer state restored)
    reproduces an uninterrupted run exactly.  On divergence (non-finite
    values, or the epoch loss exploding past divergence_factor times the
    first epoch's) the loop stops and the report carries the last finished
    epoch's parameters with `aborted` set.
    """
    if epochs < 0 or batch_size < 1:
        raise ValueError("epochs must be >= 0 and batch_size >= 1")
    if not scenarios:
        raise ValueError("empty scenario set")
    delta_star = solve_equilibrium(net)
    raw = controller.raw_parameters()
    adam = optimizer if optimizer is not None else AdamState.zeros(raw.size)
    losses: list[float] = []
    first_loss = None
    good_raw = raw.copy()
    aborted = False
    for epoch in range(start_epoch, start_epoch + epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(scenarios))
        epoch_losses = []
        try:
            for lo in range(0, len(order), batch_size):
                chunk = [scenarios[i] for i in order[lo : lo + batch_size]]
                ctrl = controller.with_raw_parameters(raw)
                loss, grad = grad_loss(
                    net, ctrl, chunk, cost,
                    dt=dt, smooth_max=smooth_max, delta_star=delta_star,
                )
                raw = adam.update(raw, grad, lr)
                epoch_losses.append(loss)
            avg = float(np.mean(epoch_losses))
            if first_loss is None:
                first_loss = avg
            if not np.isfinite(avg) or avg > divergence_factor * first_loss:
                aborted = True
        except IntegrationError:
            aborted = True
        if aborted:
            raw = good_raw
            break
        losses.append(avg)
        good_raw = raw.copy()
        if callback is not None:
            callback(epoch, avg)
    final = controller.with_raw_parameters(raw)
    config = {
        "epochs": epochs,
        "start_epoch": start_epoch,
        "batch_size": batch_size,
        "lr": lr,
        "seed": seed,
        "dt": dt,
        "smooth_max": smooth_max,
        "n_scenarios": len(scenarios),
        "controller": type(final).__name__,
    }
    return TrainReport(
        controller=final,
        losses=tuple(losses),
        config=config,
        optimizer=adam,
        aborted=aborted,
    )


# --- gradient verification ---------------------------------------------------


@dataclass(frozen=True)
class GradientCheckReport:
    """Relative errors of reverse-mode vs central-difference derivatives."""

    entries: tuple[tuple[int, int, float], ...]  # (scenario index, coordinate, rel err)
    max_rel_err: float
    n_skipped: int

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err <= tol


def _near_kink_or_tie(
    omega_h: np.ndarray, controller: Controller, tie_tol: float, kink_tol: float
) -> bool:
    absw = np.abs(omega_h)
    top = np.sort(absw, axis=0)[-2:]
    if np.any(top[1] - top[0] < tie_tol):
        return True
    bp = getattr(controller, "breakpoints", None)
    if bp is None and isinstance(controller, AdaptiveController):
        bp = getattr(controller.base, "breakpoints", None)
    # record 0 is excluded: the initial state does not depend on the
    # parameters, so a kink there (omega = 0 on the default grid) is never
    # on a derivative path
    if bp is not None and np.abs(omega_h[1:][..., None] - bp).min() < kink_tol:
        return True
    return False


def gradient_check(
    net: Network,
    controller: Controller,
    scenarios: Sequence[Scenario],
    cost: CostSpec,
    *,
    pairs: int = 50,
    seed: int = 0,
    fd_step: float = 1e-4,
    dt: float = 0.01,
    smooth_max: bool = False,
    tie_tol: float = 1e-6,
    kink_tol: float = 1e-6,
    min_grad: float = 1e-6,
) -> GradientCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    Samples (scenario, coordinate) pairs.  Scenarios whose trajectories pass
    within `kink_tol` of a breakpoint or have a near-tied per-bus maximum are
    skipped (the hard-max loss is not differentiable there), as are
    coordinates whose derivative is below `min_grad` both ways (nothing to
    compare above the difference-quotient noise floor).
    """
    gen = np.random.default_rng(seed)
    raw0 = controller.raw_parameters()
    delta_star = solve_equilibrium(net)
    n_steps = _cost_steps(cost, dt)
    cache: dict[int, tuple[np.ndarray, bool]] = {}
    entries: list[tuple[int, int, float]] = []
    skipped = 0
    attempts = 0
    while len(entries) < pairs and attempts < 40 * pairs:
        attempts += 1
        s_idx = int(gen.integers(len(scenarios)))
        coord = int(gen.integers(raw0.size))
        scen = scenarios[s_idx]
        if s_idx not in cache:
            batch = _Batch(net, controller, [scen], dt, n_steps, delta_star)
            omega_h = _forward(net, controller, batch)[1]
            grad = grad_loss(
                net, controller, scen, cost,
                dt=dt, smooth_max=smooth_max, delta_star=delta_star,
            )[1]
            bad = not smooth_max and _near_kink_or_tie(
                omega_h, controller, tie_tol, kink_tol
            )
            cache[s_idx] = (grad, bad)
        grad, bad = cache[s_idx]
        if bad:
            skipped += 1
            continue
        hi, lo = raw0.copy(), raw0.copy()
        hi[coord] += fd_step
        lo[coord] -= fd_step
        args = dict(dt=dt, smooth_max=smooth_max, delta_star=delta_star)
        f_hi = batch_loss(net, controller.with_raw_parameters(hi), [scen], cost, **args)
        f_lo = batch_loss(net, controller.with_raw_parameters(lo), [scen], cost, **args)
        fd = (f_hi - f_lo) / (2 * fd_step)
        if abs(fd) < min_grad and abs(grad[coord]) < min_grad:
            skipped += 1
            continue
        rel = abs(fd - grad[coord]) / max(abs(fd), abs(grad[coord]))
        entries.append((s_idx, coord, float(rel)))
    if len(entries) < pairs:
        raise RuntimeError(
            f"could not collect {pairs} checkable pairs ({skipped} skipped)"
        )
    return GradientCheckReport(
        entries=tuple(entries),
        max_rel_err=float(max(e[2] for e in entries)),
        n_skipped=skipped,
    )
