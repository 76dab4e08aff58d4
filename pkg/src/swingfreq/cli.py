"""Command line interface: simulate, train, evaluate, certify.

Exit codes: 0 on success, 2 for input errors (bad case file, malformed
controller, mismatched dimensions, bad flags), 3 when training diverges,
4 when certification is refused or the certificate fails.

`--case` takes a bundled case name ("ne39", "two_bus") or a path to a case
JSON; `--controller` takes a fresh controller type (droop, pwl, integral,
adaptive) or a path to a saved controller; `--checkpoint` points at a
training checkpoint.  All randomness is keyed by `--seed`, and output files
are byte-identical across reruns with the same arguments.  The
SWINGFREQ_THREADS environment variable caps evaluation parallelism.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .controllers import (
    AdaptiveController,
    Controller,
    ControllerError,
    DroopController,
    MonotonePWLController,
    SaturatedController,
    controller_from_dict,
    controller_to_dict,
    load_controller,
)
from .dynamics import (
    BasisSignal,
    Disturbance,
    IntegrationError,
    SystemState,
    rollout,
)
from .lyapunov import (
    CertificationError,
    certificate_report,
    check_decrease,
    compute_gammas,
    estimate_roa,
    fit_margin_constant,
)
from .netmodel import (
    AssumptionViolation,
    CaseError,
    ConvergenceError,
    Network,
    bundled_case_path,
    coi_project,
    load_case,
    solve_equilibrium,
)
from .training import (
    AdamState,
    CostSpec,
    Scenario,
    make_cost_spec,
    make_scenarios,
    restoration_cost,
    train,
    transient_loss,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DIVERGED = 3
EXIT_CERT = 4

EVAL_ONSET = 2.0
RESTORE_WINDOW = (10.0, 15.0)
CONTROLLER_KINDS = ("droop", "pwl", "integral", "adaptive")


def _resolve_case(args) -> Network:
    path = Path(args.case)
    if path.suffix != ".json" and not path.exists():
        path = bundled_case_path(args.case)
    return load_case(path, repair_balance=getattr(args, "repair_balance", False))


def _fresh_controller(kind: str, n: int) -> Controller:
    if kind == "droop":
        return DroopController.initial(n)
    if kind == "pwl":
        return MonotonePWLController.initial(n)
    if kind == "integral":
        return AdaptiveController.initial(
            MonotonePWLController.initial(n), 1, feature_mode="constant"
        )
    if kind == "adaptive":
        return AdaptiveController.initial(
            MonotonePWLController.initial(n), 3, feature_mode="basis"
        )
    raise ControllerError(
        f"unknown controller {kind!r} (expected one of {', '.join(CONTROLLER_KINDS)}, "
        "or a path to a controller JSON)"
    )


def _load_checkpoint(path: str | Path):
    """Load either a full training checkpoint or a bare controller file.

    Returns (controller, optimizer or None, config or None, losses).
    """
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except FileNotFoundError:
        raise ControllerError(f"checkpoint not found: {p}") from None
    except json.JSONDecodeError as exc:
        raise ControllerError(f"malformed checkpoint {p}: {exc}") from None
    if not isinstance(doc, dict):
        raise ControllerError(f"malformed checkpoint {p}: expected a JSON object")
    if "controller" in doc:
        ctrl = controller_from_dict(doc["controller"])
        adam = AdamState.from_dict(doc["optimizer"]) if "optimizer" in doc else None
        return ctrl, adam, doc.get("config"), list(doc.get("losses", []))
    return controller_from_dict(doc), None, None, []


def _resolve_controller(args, net: Network) -> tuple[Controller, str]:
    if getattr(args, "checkpoint", None):
        ctrl = _load_checkpoint(args.checkpoint)[0]
        label = Path(args.checkpoint).stem
    else:
        spec = args.controller
        if Path(spec).suffix == ".json" or Path(spec).exists():
            ctrl = load_controller(spec)
            label = Path(spec).stem
        else:
            ctrl = _fresh_controller(spec, net.n)
            label = spec
    if ctrl.n != net.n:
        raise ControllerError(
            f"controller is sized for {ctrl.n} buses but the case has {net.n}"
        )
    return ctrl, label


def _n_workers(n_jobs: int) -> int:
    env = os.environ.get("SWINGFREQ_THREADS", "").strip()
    cap = int(env) if env else (os.cpu_count() or 1)
    if cap < 1:
        raise ValueError("SWINGFREQ_THREADS must be a positive integer")
    return max(1, min(n_jobs, cap))


def _scenario_hash(scen: Scenario) -> str:
    doc = {
        "steps": [list(s) for s in scen.dist.steps],
        "noise_eps": scen.dist.noise_eps,
        "seed": scen.dist.seed,
        "eta": scen.basis.eta.tolist(),
        "coeffs": scen.basis.coeffs.tolist(),
    }
    blob = json.dumps(doc, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- simulate ----------------------------------------------------------------


def cmd_simulate(args) -> int:
    net = _resolve_case(args)
    ctrl, label = _resolve_controller(args, net)
    if args.saturate is not None:
        ctrl = SaturatedController(ctrl, args.saturate)
    scen = make_scenarios(net, 1, args.seed, noise_eps=args.noise, onset=EVAL_ONSET)[0]
    basis, dist = scen.basis, scen.dist
    if args.no_disturbance:
        basis = BasisSignal(basis.eta, np.zeros_like(basis.coeffs), basis.dt_ref)
        dist = None
    method = "euler" if args.euler else "rk4"
    traj = rollout(
        net, ctrl, basis, dist, horizon=args.horizon, dt=args.dt, method=method
    )
    out = _out_dir(args)
    traj.write_csv(out / "trajectory.csv")
    traj.write_meta(out / "trajectory.json")
    print(f"case {args.case}: {net.n} buses, controller {label}, {method}")
    print(f"wrote {out / 'trajectory.csv'} ({traj.n_records} records)")
    tail = traj.tail(EVAL_ONSET) if dist is not None and dist.steps else traj
    print(f"nadir         {np.abs(tail.omega).max():.6g} rad/s")
    print(f"final |omega| {np.abs(tail.omega[-1]).max():.6g} rad/s")
    cost = make_cost_spec(net, args.seed)
    if tail.t[-1] >= cost.T - 1e-9:
        print(f"transient     {transient_loss(tail, cost):.6g}")
    if tail.t[-1] >= RESTORE_WINDOW[1] - 1e-9:
        print(f"restoration   {restoration_cost(tail, RESTORE_WINDOW):.6g} rad/s "
              f"(mean over {RESTORE_WINDOW[0]:g}..{RESTORE_WINDOW[1]:g} s after onset)")
    return EXIT_OK


# --- train -------------------------------------------------------------------


def cmd_train(args) -> int:
    net = _resolve_case(args)
    adam = None
    start = 0
    losses_prev: list[float] = []
    if args.checkpoint:
        ctrl, adam, cfg, losses_prev = _load_checkpoint(args.checkpoint)
        if cfg is None:
            raise ControllerError(
                f"{args.checkpoint} has no training config; cannot resume from it"
            )
        if cfg.get("case") != args.case:
            raise ControllerError(
                f"checkpoint was trained on case {cfg.get('case')!r}, not {args.case!r}"
            )
        seed = cfg["seed"]
        n_scen = cfg["n_scenarios"]
        batch_size = cfg["batch_size"]
        lr = cfg["lr"]
        dt = cfg["dt"]
        smooth = cfg["smooth_max"]
        noise = cfg.get("noise", 0.0)
        cost = CostSpec(
            cfg["cost"]["gamma"], np.array(cfg["cost"]["c"]), cfg["cost"]["T"]
        )
        start = cfg["epochs_done"]
        ctype = cfg.get("controller_type", type(ctrl).__name__)
    else:
        ctrl, ctype = _resolve_controller(args, net)
        seed = args.seed
        n_scen = args.scenarios
        batch_size = args.batch_size
        lr = args.lr
        dt = args.dt
        smooth = args.smooth_max
        noise = args.noise
        cost = make_cost_spec(net, seed)
    if ctrl.n != net.n:
        raise ControllerError(
            f"controller is sized for {ctrl.n} buses but the case has {net.n}"
        )
    scenarios = make_scenarios(net, n_scen, seed, noise_eps=noise, onset=0.0)

    def progress(epoch: int, loss: float) -> None:
        if (epoch + 1) % args.log_every == 0 or epoch == start:
            print(f"epoch {epoch + 1:4d}  loss {loss:.6f}")

    report = train(
        net, ctrl, scenarios, cost,
        epochs=args.epochs, batch_size=batch_size, lr=lr, seed=seed, dt=dt,
        smooth_max=smooth, optimizer=adam, start_epoch=start, callback=progress,
    )
    epochs_done = start + len(report.losses)
    doc = {
        "version": __version__,
        "controller": controller_to_dict(report.controller),
        "optimizer": report.optimizer.to_dict(),
        "losses": losses_prev + list(report.losses),
        "config": {
            "case": args.case,
            "controller_type": ctype,
            "seed": seed,
            "n_scenarios": n_scen,
            "epochs_done": epochs_done,
            "batch_size": batch_size,
            "lr": lr,
            "dt": dt,
            "smooth_max": smooth,
            "noise": noise,
            "cost": {"gamma": cost.gamma, "c": cost.c.tolist(), "T": cost.T},
        },
    }
    out = _out_dir(args)
    path = out / "checkpoint.json"
    _write_json(path, doc)
    if report.aborted:
        kept = (
            f"parameters from epoch {epochs_done}" if epochs_done else "initial parameters"
        )
        print(
            f"training diverged during epoch {epochs_done + 1}; kept the {kept} "
            f"in {path}",
            file=sys.stderr,
        )
        return EXIT_DIVERGED
    if report.losses:
        print(f"trained {len(report.losses)} epochs: "
              f"loss {report.losses[0]:.6f} -> {report.losses[-1]:.6f}")
    print(f"wrote {path}")
    return EXIT_OK


# --- evaluate ----------------------------------------------------------------


def cmd_evaluate(args) -> int:
    net = _resolve_case(args)
    if args.horizon < EVAL_ONSET + RESTORE_WINDOW[1]:
        raise ValueError(
            f"evaluation needs at least {RESTORE_WINDOW[1]:g} s after the "
            f"{EVAL_ONSET:g} s onset; pass --horizon >= "
            f"{EVAL_ONSET + RESTORE_WINDOW[1]:g}"
        )
    entries: list[tuple[str, Controller]] = []
    for path in args.checkpoint or []:
        ctrl = _load_checkpoint(path)[0]
        entries.append((Path(path).stem, ctrl))
    for spec in args.controller or []:
        if Path(spec).suffix == ".json" or Path(spec).exists():
            entries.append((Path(spec).stem, load_controller(spec)))
        else:
            entries.append((spec, _fresh_controller(spec, net.n)))
    if not entries:
        raise ValueError("nothing to evaluate: pass --checkpoint and/or --controller")
    seen: dict[str, int] = {}
    labeled = []
    for label, ctrl in entries:
        if ctrl.n != net.n:
            raise ControllerError(
                f"controller {label!r} is sized for {ctrl.n} buses but the case "
                f"has {net.n}"
            )
        seen[label] = seen.get(label, 0) + 1
        labeled.append((f"{label}#{seen[label]}" if seen[label] > 1 else label, ctrl))

    scenarios = make_scenarios(
        net, args.scenarios, args.seed, noise_eps=args.noise, onset=EVAL_ONSET
    )
    cost = make_cost_spec(net, args.seed)
    method = "euler" if args.euler else "rk4"

    def run_one(job):
        label, ctrl, scen = job
        traj = rollout(
            net, ctrl, scen.basis, scen.dist,
            horizon=args.horizon, dt=args.dt, method=method,
        )
        tail = traj.tail(EVAL_ONSET)
        return {
            "controller": label,
            "scenario_hash": _scenario_hash(scen),
            "nadir": float(np.abs(tail.omega).max()),
            "restoration": restoration_cost(tail, RESTORE_WINDOW),
            "transient_loss": transient_loss(tail, cost),
            "peak_u": float(np.abs(tail.u).max()),
        }

    jobs = [(label, ctrl, scen) for label, ctrl in labeled for scen in scenarios]
    with ThreadPoolExecutor(max_workers=_n_workers(len(jobs))) as pool:
        rows = list(pool.map(run_one, jobs))

    # one aggregate row per controller; the shared scenario-set hash proves
    # every controller saw the identical battery
    set_hash = hashlib.sha256(
        "".join(_scenario_hash(s) for s in scenarios).encode()
    ).hexdigest()[:12]
    cols = ("transient_loss", "restoration", "nadir", "peak_u")

    def _agg(values: list[float]) -> tuple[float, float]:
        mean = float(np.mean(values))
        se = float(np.std(values, ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0
        return mean, se

    summary = {}
    for label, _ in labeled:
        mine = [r for r in rows if r["controller"] == label]
        stats: dict[str, float] = {"n_scenarios": len(mine)}
        for c in cols:
            mean, se = _agg([r[c] for r in mine])
            stats[f"{c}_mean"] = mean
            stats[f"{c}_se"] = se
        summary[label] = stats

    out = _out_dir(args)
    header = ["controller", "scenario_hash", "n_scenarios"]
    for c in cols:
        header += [f"{c}_mean", f"{c}_se"]
    lines = [",".join(header)]
    for label, _ in labeled:
        s = summary[label]
        cells = [label, set_hash, str(s["n_scenarios"])]
        for c in cols:
            cells += [repr(float(s[f"{c}_mean"])), repr(float(s[f"{c}_se"]))]
        lines.append(",".join(cells))
    (out / "comparison.csv").write_text("\n".join(lines) + "\n")
    _write_json(
        out / "comparison.json",
        {
            "case": args.case,
            "seed": args.seed,
            "onset": EVAL_ONSET,
            "horizon": args.horizon,
            "dt": args.dt,
            "noise": args.noise,
            "method": method,
            "scenario_set_hash": set_hash,
            "rows": rows,
            "summary": summary,
        },
    )
    width = max(len(label) for label, _ in labeled)
    print(f"{args.scenarios} scenarios on {args.case}, onset {EVAL_ONSET:g} s")
    for label, _ in labeled:
        s = summary[label]
        print(
            f"{label:<{width}}  transient {s['transient_loss_mean']:.4g}  "
            f"restoration {s['restoration_mean']:.4g}  "
            f"nadir {s['nadir_mean']:.4g}"
        )
    print(f"wrote {out / 'comparison.csv'} and {out / 'comparison.json'}")
    return EXIT_OK


# --- certify -----------------------------------------------------------------


def _zero_sinusoids(scen: Scenario) -> Scenario:
    coeffs = np.array(scen.basis.coeffs)
    coeffs[:, :-1] = 0.0
    return Scenario(
        scen.dist, BasisSignal(scen.basis.eta, coeffs, scen.basis.dt_ref), scen.x0
    )


def _certify_battery(
    net: Network,
    controller: Controller,
    count: int,
    seed: int | np.random.SeedSequence,
    delta_star: np.ndarray,
) -> tuple[Scenario, ...]:
    """Scenarios on which the decrease guarantee applies to this controller.

    Full-basis adaptive controllers get steps plus sinusoid variation;
    constant-feature ones get steps only (sinusoids are outside their model
    class); static controllers get no injection change at all, just perturbed
    in-region initial states, since their guarantee is around a fixed
    operating point.
    """
    if isinstance(controller, AdaptiveController):
        scens = make_scenarios(net, count, seed, onset=EVAL_ONSET)
        if controller.feature_mode == "constant":
            scens = tuple(_zero_sinusoids(s) for s in scens)
        return scens
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    out = []
    for child in ss.spawn(count):
        gen = np.random.default_rng(child)
        eta = gen.uniform(0.005 * np.pi, 0.02 * np.pi, (net.n, 2))
        basis = BasisSignal(eta, np.zeros((net.n, 3)))
        x0 = SystemState(
            coi_project(delta_star + gen.uniform(-0.05, 0.05, net.n)),
            gen.uniform(-0.05, 0.05, net.n),
            np.zeros((net.n, 0)),
        )
        out.append(Scenario(Disturbance(), basis, x0))
    return tuple(out)


def cmd_certify(args) -> int:
    net = _resolve_case(args)
    ctrl, label = _resolve_controller(args, net)
    if args.saturate is not None:
        ctrl = SaturatedController(ctrl, args.saturate)
    if isinstance(ctrl, SaturatedController):
        print(
            "certification refused: saturated controllers are outside the "
            "certified class",
            file=sys.stderr,
        )
        return EXIT_CERT
    delta_star = solve_equilibrium(net)
    batt_ss, cal_ss = np.random.SeedSequence(args.seed).spawn(2)
    battery = _certify_battery(net, ctrl, args.scenarios, batt_ss, delta_star)
    calibration = _certify_battery(net, ctrl, args.calibration, cal_ss, delta_star)

    def roll(scen: Scenario):
        return rollout(
            net, ctrl, scen.basis, scen.dist,
            horizon=args.horizon, dt=args.dt, x0=scen.x0,
        )

    cal_trajs = [roll(s) for s in calibration]
    fit = fit_margin_constant(
        cal_trajs, net, [s.basis for s in calibration], ctrl, delta_star
    )
    reports = [
        check_decrease(
            roll(s), net, s.basis, ctrl, delta_star, tol_coeff=fit.tol_coeff
        )
        for s in battery
    ]
    worst = max(reports, key=lambda r: r.worst_margin)
    bounds = compute_gammas(
        net, ctrl, margin=args.margin, samples=args.samples, rng=args.seed
    )
    roa = estimate_roa(net, bounds, delta_star)
    doc = certificate_report(bounds, worst, roa)
    doc.update(
        controller=label,
        case=args.case,
        dt=args.dt,
        horizon=args.horizon,
        n_trajectories=len(reports),
        tol_coeff=fit.tol_coeff,
        worst_by_trajectory=[r.worst_margin for r in reports],
    )
    out = _out_dir(args)
    _write_json(out / "certificate.json", doc)
    print(f"gamma1 {bounds.gamma1:.6g}, gamma2 {bounds.gamma2:.6g} "
          f"(beta1 {bounds.beta1:.6g}, beta2 {bounds.beta2:.6g})")
    print(f"decrease over {len(reports)} trajectories: worst margin "
          f"{worst.worst_margin:.3e} vs tol {worst.tol:.3e}")
    print(f"region ball r {roa.r:.6g}, certified level rho {roa.rho:.6g}")
    print(f"wrote {out / 'certificate.json'}")
    if doc["pass"]:
        print("certificate PASS")
        return EXIT_OK
    print(
        f"certificate FAILED: margin {worst.worst_margin:.3e} at "
        f"t={worst.worst_time:.3f} s exceeds tol {worst.tol:.3e}",
        file=sys.stderr,
    )
    return EXIT_CERT


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swingfreq",
        description="Adaptive frequency control of lossless power networks.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    case = argparse.ArgumentParser(add_help=False)
    case.add_argument(
        "--case", default="ne39",
        help="bundled case name (ne39, two_bus) or path to a case JSON",
    )
    case.add_argument(
        "--repair-balance", action="store_true",
        help="rebalance net injections through the largest source instead of failing",
    )

    single = argparse.ArgumentParser(add_help=False)
    single.add_argument(
        "--controller", default="droop",
        help="fresh controller type (droop, pwl, integral, adaptive) or a JSON path",
    )
    single.add_argument("--checkpoint", help="load the controller from this checkpoint")
    single.add_argument(
        "--saturate", type=float, metavar="U_MAX",
        help="clip the control to |u| <= U_MAX",
    )

    p = sub.add_parser(
        "simulate", parents=[case, single],
        help="roll one disturbance scenario and write the trajectory",
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--horizon", type=float, default=15.0, help="simulated seconds")
    p.add_argument("--noise", type=float, default=0.0, metavar="EPS",
                   help="uniform injection noise amplitude")
    p.add_argument("--no-disturbance", action="store_true",
                   help="zero the injection variation (equilibrium run)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--euler", action="store_true", help="integrate with explicit Euler")
    g.add_argument("--rk4", action="store_true", help="integrate with RK4 (default)")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser(
        "train", parents=[case],
        help="train a controller on random disturbance scenarios",
    )
    p.add_argument(
        "--controller", default="adaptive",
        help="fresh controller type (droop, pwl, integral, adaptive) or a JSON path",
    )
    p.add_argument("--checkpoint", help="resume training from this checkpoint")
    p.add_argument("--scenarios", type=int, default=50)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=25)
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--noise", type=float, default=0.0, metavar="EPS")
    p.add_argument("--smooth-max", action="store_true",
                   help="log-sum-exp softening of the peak-deviation term")
    p.add_argument("--log-every", type=int, default=10)
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser(
        "evaluate", parents=[case],
        help="compare controllers on a shared scenario battery",
    )
    p.add_argument("--checkpoint", action="append",
                   help="checkpoint to evaluate (repeatable)")
    p.add_argument("--controller", action="append",
                   help="fresh controller type or JSON path to evaluate (repeatable)")
    p.add_argument("--scenarios", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--horizon", type=float, default=17.0,
                   help="simulated seconds (needs onset + 15)")
    p.add_argument("--noise", type=float, default=0.0, metavar="EPS")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--euler", action="store_true")
    g.add_argument("--rk4", action="store_true")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser(
        "certify", parents=[case, single],
        help="check the energy certificate along sampled trajectories",
    )
    p.add_argument("--scenarios", type=int, default=20)
    p.add_argument("--calibration", type=int, default=5,
                   help="extra scenarios used only to fit the tolerance")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dt", type=float, default=0.005)
    p.add_argument("--horizon", type=float, default=6.0)
    p.add_argument("--margin", type=float, default=0.01,
                   help="angle margin to pi/2 defining the certified region")
    p.add_argument("--samples", type=int, default=2000,
                   help="region samples for the cross-check bounds")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_certify)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CertificationError as exc:
        print(f"certification failed: {exc}", file=sys.stderr)
        return EXIT_CERT
    except IntegrationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CaseError, ControllerError, ConvergenceError, AssumptionViolation,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
