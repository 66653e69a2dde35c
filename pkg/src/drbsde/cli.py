"""Command-line front end.

Subcommands: simulate | calibrate | solve | oracle | skorokhod | report.
Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O.
Retrain parallelism comes from --threads or the DRBSDE_THREADS variable.
"""

from __future__ import annotations

import argparse
import datetime
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import fit_mle, load_price_csv, residual_diagnostics
from .config import (GameSetup, bundled_config_path, config_digest, load_config,
                     resolve_evaluation, resolve_game, resolve_hyper, resolve_oracle_options)
from .dynamics import OUParams, TimeGrid, derive_seed, simulate_paths
from .errors import ConfigError, NumericalError
from .oracle import GridSpec, OracleSolution, compare_to_deep, grid_dp_solve
from .persist import load_solver, save_solver, write_csv, write_json, write_report_files
from .skorokhod import decompose_value_path, verify_skorokhod
from .solver import (default_workers, evaluate_solver, rollout, train_backward,
                     y0_distribution)

__all__ = ["main"]


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _write_manifest(out_dir: Path, command: str, digest: str | None, seeds: dict,
                    outputs: list[str], resolved: dict | None = None) -> None:
    manifest = {
        "schema_version": 1,
        "command": command,
        "config_sha256": digest,
        "seeds": seeds,
        "resolved": resolved or {},
        "outputs": sorted(outputs),
        "package_version": __version__,
        "created_utc": _now(),
    }
    write_json(out_dir / "manifest.json", manifest)


def _load_named_config(spec: str) -> tuple[dict, str]:
    path = Path(spec)
    if not path.exists():
        path = bundled_config_path(spec)
    cfg = load_config(path)
    return cfg, config_digest(cfg)


def _out_dir(spec: str) -> Path:
    out = Path(spec)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg, digest = _load_named_config(args.config)
    setup = resolve_game(cfg)
    ev = resolve_evaluation(cfg)
    seed = args.seed if args.seed is not None else ev["seed"]
    out = _out_dir(args.out)

    batch = simulate_paths(setup.ou.coefficients(), setup.x0, setup.grid, ev["paths"], seed)
    nodes = setup.grid.nodes
    outputs = []

    mean = batch.states.mean(axis=0)
    std = batch.states.std(axis=0)
    d = batch.dim
    header = ["step", "t"] + [f"mean_{j}" for j in range(d)] + [f"std_{j}" for j in range(d)]
    rows = [[n, nodes[n], *mean[n], *std[n]] for n in range(setup.grid.steps + 1)]
    write_csv(out / "summary.csv", header, rows)
    outputs.append("summary.csv")

    n_export = min(ev["export_paths"], batch.n_paths)
    header = ["path", "step", "t"] + [f"x_{j}" for j in range(d)]
    rows = [[p, n, nodes[n], *batch.states[p, n]]
            for p in range(n_export) for n in range(setup.grid.steps + 1)]
    write_csv(out / "paths.csv", header, rows)
    outputs.append("paths.csv")

    header = ["path", "step"] + [f"db_{j}" for j in range(d)]
    rows = [[p, n, *batch.increments[p, n]]
            for p in range(n_export) for n in range(setup.grid.steps)]
    write_csv(out / "increments.csv", header, rows)
    outputs.append("increments.csv")

    _write_manifest(out, "simulate", digest, {"simulation": seed}, outputs, setup.resolved)
    return 0


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------

def cmd_calibrate(args) -> int:
    out = _out_dir(args.out)
    series_list = load_price_csv(args.csv, dt_years=args.dt_years)
    outputs = []
    summary_rows = []
    for series in series_list:
        fit = residual_diagnostics(fit_mle(series, half_quadratic=args.half_quadratic), series)
        stem = series.label.replace(" ", "_").replace("/", "_")
        write_json(out / f"{stem}_fit.json", fit.to_dict())
        outputs.append(f"{stem}_fit.json")
        write_csv(out / f"{stem}_residuals.csv", ["index", "residual"],
                  ((i, r) for i, r in enumerate(fit.residuals)))
        outputs.append(f"{stem}_residuals.csv")
        write_csv(out / f"{stem}_acf.csv", ["lag", "acf"],
                  ((k, v) for k, v in enumerate(fit.acf)))
        outputs.append(f"{stem}_acf.csv")
        write_csv(out / f"{stem}_qq.csv", ["theoretical", "empirical"], fit.qq)
        outputs.append(f"{stem}_qq.csv")
        summary_rows.append([series.label, fit.kappa, fit.mu, fit.sigma, fit.ks_pvalue])
    write_csv(out / "calibration_summary.csv",
              ["label", "kappa", "mu", "sigma", "ks_pvalue"], summary_rows)
    outputs.append("calibration_summary.csv")
    _write_manifest(out, "calibrate", None, {}, outputs,
                    {"csv": str(args.csv), "dt_years": args.dt_years,
                     "half_quadratic": args.half_quadratic})
    return 0


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------

def cmd_solve(args) -> int:
    cfg, digest = _load_named_config(args.config)
    setup = resolve_game(cfg)
    hyper, retrains = resolve_hyper(cfg)
    ev = resolve_evaluation(cfg)
    if args.seed is not None:
        hyper = replace(hyper, seed=args.seed)
    if args.retrains is not None:
        retrains = args.retrains
    if args.epochs is not None:
        hyper = replace(hyper, epochs_schedule=tuple(args.epochs))
    workers = args.threads if args.threads is not None else default_workers()
    out = _out_dir(args.out)

    # persist the retrain-0 solver, then aggregate the distribution
    coeffs = setup.ou.coefficients()
    solver = train_backward(setup.grid, coeffs, setup.x0, setup.barriers, setup.payoff,
                            replace(hyper, seed=derive_seed(hyper.seed, 100)), ou=setup.ou)
    solver_dir = out / "solver"
    save_solver(solver, solver_dir)
    outputs = [f"solver/{p.name}" for p in sorted(solver_dir.iterdir())]

    report = y0_distribution(setup.grid, setup.ou, setup.x0, setup.barriers, setup.payoff,
                             hyper, retrains=retrains, base_seed=hyper.seed,
                             eval_paths=ev["paths"], workers=workers)
    outputs += write_report_files(report, out, loss_history=solver.loss_history)
    _write_manifest(out, "solve", digest,
                    {"training": hyper.seed, "evaluation": ev["seed"]},
                    outputs, setup.resolved)
    return 0


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------

def _save_oracle(solution: OracleSolution, out: Path) -> list[str]:
    meta = {
        "format": "drbsde-oracle",
        "version": 1,
        "grid": {"horizon": solution.grid.horizon, "steps": solution.grid.steps},
        "xs": {"min": float(solution.xs[0]), "max": float(solution.xs[-1]),
               "n_nodes": int(solution.xs.shape[0])},
        "x0": solution.x0,
        "y0": solution.y0,
        "barriers": solution.barriers.to_dict(),
        "payoff": solution.payoff.to_dict(),
        "transition": solution.transition,
        "interpolation": solution.interpolation,
    }
    write_json(out / "oracle.json", meta)
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                    for a in (solution.y, solution.y_tilde, solution.z))
    (out / "surfaces.bin").write_bytes(blob)

    rows = []
    n_steps = solution.grid.steps
    for n in range(n_steps + 1):
        t = solution.grid.nodes[n]
        stop_u = solution.stop_upper[n] if n < n_steps else np.zeros_like(solution.xs, dtype=bool)
        stop_l = solution.stop_lower[n] if n < n_steps else np.zeros_like(solution.xs, dtype=bool)
        for k, x in enumerate(solution.xs):
            rows.append([t, x, solution.y[n, k], int(stop_u[k]), int(stop_l[k])])
    write_csv(out / "surfaces.csv", ["t", "x", "y", "stop_upper", "stop_lower"], rows)
    return ["oracle.json", "surfaces.bin", "surfaces.csv"]


def cmd_oracle(args) -> int:
    cfg, digest = _load_named_config(args.config)
    setup = resolve_game(cfg)
    if setup.ou.dim != 1:
        raise ConfigError("the oracle command requires a 1-d game configuration")
    opts = resolve_oracle_options(cfg)
    gspec = GridSpec.for_problem(setup.ou, float(setup.x0[0]),
                                 half_width_sds=opts["half_width_sds"],
                                 n_nodes=opts["n_nodes"], quad_order=opts["quad_order"],
                                 interpolation=opts["interpolation"])
    solution = grid_dp_solve(setup.ou, setup.grid, gspec, setup.barriers, setup.payoff,
                             x0=float(setup.x0[0]), transition=opts["transition"])
    out = _out_dir(args.out)
    outputs = _save_oracle(solution, out)

    if args.solver_dir:
        solver = load_solver(args.solver_dir)
        ev = resolve_evaluation(cfg)
        paths = simulate_paths(setup.ou.coefficients(), setup.x0, setup.grid,
                               ev["paths"], ev["seed"])
        comparison = compare_to_deep(solution, solver, paths)
        write_json(out / "comparison.json", comparison.__dict__)
        outputs.append("comparison.json")

    resolved = dict(setup.resolved)
    resolved["ou"] = {"kappa": np.diag(setup.ou.kappa).tolist(),
                      "mu": setup.ou.mu.tolist(),
                      "sigma": np.diag(setup.ou.sigma).tolist()}
    _write_manifest(out, "oracle", digest, {}, outputs, resolved)
    return 0


# ---------------------------------------------------------------------------
# skorokhod
# ---------------------------------------------------------------------------

def _load_oracle_dir(src: Path):
    meta = json.loads((src / "oracle.json").read_text(encoding="utf-8"))
    if meta.get("format") != "drbsde-oracle":
        raise ConfigError(f"{src} is not an oracle directory")
    from .solver import BarrierSpec, PayoffSpec
    grid = TimeGrid(float(meta["grid"]["horizon"]), int(meta["grid"]["steps"]))
    xs = np.linspace(meta["xs"]["min"], meta["xs"]["max"], meta["xs"]["n_nodes"])
    n_steps = grid.steps
    k = xs.shape[0]
    flat = np.frombuffer((src / "surfaces.bin").read_bytes(), dtype="<f8").astype(float)
    sizes = [(n_steps + 1) * k, n_steps * k, n_steps * k]
    if flat.size != sum(sizes):
        raise ConfigError(f"{src}/surfaces.bin has unexpected size")
    y = flat[:sizes[0]].reshape(n_steps + 1, k)
    y_tilde = flat[sizes[0]:sizes[0] + sizes[1]].reshape(n_steps, k)
    z = flat[sizes[0] + sizes[1]:].reshape(n_steps, k)
    barriers = BarrierSpec.from_dict(meta["barriers"])
    payoff = PayoffSpec.from_dict(meta["payoff"])
    return OracleSolution(grid=grid, xs=xs, y=y, y_tilde=y_tilde, z=z,
                          stop_upper=np.zeros_like(y_tilde, dtype=bool),
                          stop_lower=np.zeros_like(y_tilde, dtype=bool),
                          y0=float(meta["y0"]), x0=float(meta["x0"]), barriers=barriers,
                          payoff=payoff, transition=meta["transition"],
                          interpolation=meta["interpolation"])


def cmd_skorokhod(args) -> int:
    src = Path(args.input)
    out = _out_dir(args.out)
    seed = args.seed if args.seed is not None else 1
    n_paths = args.paths

    if (src / "solver.json").exists():
        solver = load_solver(src)
        grid, barriers = solver.grid, solver.barriers
        batch = simulate_paths(solver.ou.coefficients(), solver.x0, grid, n_paths,
                               derive_seed(seed, 7))
        roll = rollout(solver, batch)
        y_tilde_paths = roll.y_tilde
        terminals = roll.y_hat[:, -1]
    elif (src / "oracle.json").exists():
        solution = _load_oracle_dir(src)
        grid, barriers = solution.grid, solution.barriers
        ou_meta = json.loads((src / "manifest.json").read_text(encoding="utf-8")) \
            if (src / "manifest.json").exists() else {}
        resolved = ou_meta.get("resolved", {})
        if "ou" not in resolved:
            raise ConfigError(f"{src}/manifest.json does not record the OU parameters")
        ou = OUParams.diagonal(resolved["ou"]["kappa"], resolved["ou"]["mu"],
                               resolved["ou"]["sigma"], dim=1)
        batch = simulate_paths(ou.coefficients(), np.array([solution.x0]), grid, n_paths,
                               derive_seed(seed, 7))
        y_tilde_paths = np.column_stack([
            solution.y_tilde_at(n, batch.states[:, n, 0]) for n in range(grid.steps)])
        terminals = solution.payoff.terminal(batch.states[:, -1, :])
    else:
        raise ConfigError(f"{src} contains neither a solver nor an oracle directory")

    nodes = grid.nodes
    alpha = -barriers.f2(nodes)
    beta = barriers.f1(nodes)
    outputs = []
    checks = []
    for p in range(n_paths):
        dec = decompose_value_path(y_tilde_paths[p], float(terminals[p]), alpha, beta,
                                   times=nodes)
        report = verify_skorokhod(dec.reversed, tol=1e-8)
        checks.append({"path": p, "passed": report.passed, "summary": report.summary(),
                       "simultaneous_hit": dec.reversed.simultaneous_hit})
        name = f"path_{p:03d}.csv"
        write_csv(out / name, ["t", "x", "y", "a", "c"],
                  zip(dec.times, dec.driver, dec.y, dec.a, dec.c))
        outputs.append(name)
    all_pass = all(c["passed"] for c in checks)
    write_json(out / "verification.json", {"all_passed": all_pass, "paths": checks})
    outputs.append("verification.json")
    _write_manifest(out, "skorokhod", None, {"paths": seed}, outputs)
    if not all_pass:
        raise NumericalError("skorokhod verification failed; see verification.json")
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(args) -> int:
    solver = load_solver(args.input)
    out = _out_dir(args.out)
    seed = args.seed if args.seed is not None else 1
    stats = evaluate_solver(solver, solver.ou.coefficients(), args.paths, derive_seed(seed, 11))
    from .solver import SolveReport
    tau1, tau2 = stats["tau1"], stats["tau2"]
    report = SolveReport(
        y0_samples=np.array([stats["y0"]]), y0_sample_kind="per_retrain",
        exit_times_p1=tau1, exit_times_p2=tau2,
        realized_exit_times_p1=stats["tau1_realized"],
        realized_exit_times_p2=stats["tau2_realized"],
        no_exit_fraction=stats["no_exit_fraction"],
        exit_fraction_p1=stats["exit_fraction_p1"],
        exit_fraction_p2=stats["exit_fraction_p2"],
        mean_exit_time=stats["mean_exit_time"],
        payoff_estimate=stats["payoff_estimate"], payoff_se=stats["payoff_se"],
        barrier_violation_max=stats["barrier_violation_max"],
        n_retrains=1, eval_paths_per_retrain=args.paths)
    outputs = write_report_files(report, out, loss_history=solver.loss_history)
    _write_manifest(out, "report", None, {"evaluation": seed}, outputs)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drbsde",
                                     description="Dynkin-game valuation via a backward "
                                                 "neural scheme for doubly reflected dynamics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate forward paths and export CSV summaries")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="fit per-series OU parameters from a price CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dt-years", type=float, default=1.0 / 52.0)
    p.add_argument("--half-quadratic", action="store_true")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("solve", help="train the backward solver and export reports")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--retrains", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--epochs", type=int, nargs="+",
                   help="override the epoch schedule (smoke runs)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("oracle", help="solve the 1-d reference problem on a grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--solver-dir", help="also compare against a trained solver")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("skorokhod", help="reconstruct reflection processes along paths")
    p.add_argument("--input", required=True, help="solver or oracle output directory")
    p.add_argument("--out", required=True)
    p.add_argument("--paths", type=int, default=8)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_skorokhod)

    p = sub.add_parser("report", help="re-evaluate a persisted solver on fresh paths")
    p.add_argument("--input", required=True, help="solver directory")
    p.add_argument("--out", required=True)
    p.add_argument("--paths", type=int, default=2 ** 14)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
