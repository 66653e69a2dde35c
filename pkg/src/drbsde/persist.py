"""On-disk formats: trained-solver directories and report exports.

A solver directory holds a JSON manifest plus one little-endian float64
blob per stage (network parameters followed by the frozen input
normalizer). Loss histories go into a single concatenated blob so every
file in the directory is byte-reproducible for fixed seeds.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .dynamics import OUParams, TimeGrid
from .errors import ConfigError
from .nets import params_from_bytes, params_to_bytes, spec_from_manifest, spec_manifest
from .solver import (BarrierSpec, FeatureNormalizer, PayoffSpec, SolveReport, StageNetwork,
                     TrainedSolver, TrainingHyper)

__all__ = ["save_solver", "load_solver", "write_report_files", "write_csv", "write_json"]

SOLVER_FORMAT = "drbsde-solver"
SOLVER_VERSION = 1


def write_json(path: Path, payload: dict) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def write_csv(path: Path, header: list[str], rows) -> None:
    """Plain CSV with full-precision float formatting (repr round-trips)."""
    path = Path(path)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_format_cell(c) for c in row))
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _format_cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def save_solver(solver: TrainedSolver, out_dir) -> Path:
    """Persist a trained solver; requires OU dynamics and a built-in payoff."""
    if solver.ou is None:
        raise ConfigError("only solvers built on OU dynamics can be persisted")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    stage_files = []
    feature_count = solver.x0.shape[0] + 1
    for stage in solver.stages:
        name = f"stage_{stage.step_index:03d}.bin"
        blob = params_to_bytes(stage.params)
        blob += np.ascontiguousarray(stage.normalizer.mean, dtype="<f8").tobytes()
        blob += np.ascontiguousarray(stage.normalizer.scale, dtype="<f8").tobytes()
        (out / name).write_bytes(blob)
        stage_files.append(name)

    history_lengths = []
    if solver.loss_history is not None:
        hist_blob = b"".join(np.ascontiguousarray(h, dtype="<f8").tobytes()
                             for h in solver.loss_history)
        (out / "loss_history.bin").write_bytes(hist_blob)
        history_lengths = [int(h.shape[0]) for h in solver.loss_history]

    manifest = {
        "format": SOLVER_FORMAT,
        "version": SOLVER_VERSION,
        "grid": {"horizon": solver.grid.horizon, "steps": solver.grid.steps},
        "ou": {
            "kappa": solver.ou.kappa.tolist(),
            "mu": solver.ou.mu.tolist(),
            "sigma": solver.ou.sigma.tolist(),
        },
        "x0": solver.x0.tolist(),
        "barriers": solver.barriers.to_dict(),
        "payoff": solver.payoff.to_dict(),
        "hyper": {
            "batch_size": solver.hyper.batch_size,
            "learning_rate": solver.hyper.learning_rate,
            "epochs_schedule": list(solver.hyper.epochs_schedule),
            "seed": solver.hyper.seed,
            "hidden_width": solver.hyper.hidden_width,
            "hidden_layers": solver.hyper.hidden_layers,
            "warm_start": solver.hyper.warm_start,
            "fresh_paths": solver.hyper.fresh_paths,
        },
        "net": spec_manifest(solver.stages[0].spec, seed=solver.hyper.seed),
        "feature_count": feature_count,
        "stage_files": stage_files,
        "final_losses": solver.final_losses.tolist(),
        "loss_history_lengths": history_lengths,
    }
    write_json(out / "solver.json", manifest)
    return out


def load_solver(solver_dir) -> TrainedSolver:
    src = Path(solver_dir)
    manifest_path = src / "solver.json"
    if not manifest_path.exists():
        raise ConfigError(f"{src} does not contain a solver.json manifest")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != SOLVER_FORMAT:
        raise ConfigError(f"{src} is not a solver directory")

    grid = TimeGrid(float(manifest["grid"]["horizon"]), int(manifest["grid"]["steps"]))
    ou = OUParams(np.asarray(manifest["ou"]["kappa"], dtype=float),
                  np.asarray(manifest["ou"]["mu"], dtype=float),
                  np.asarray(manifest["ou"]["sigma"], dtype=float))
    barriers = BarrierSpec.from_dict(manifest["barriers"])
    payoff = PayoffSpec.from_dict(manifest["payoff"])
    h = manifest["hyper"]
    hyper = TrainingHyper(batch_size=int(h["batch_size"]), learning_rate=float(h["learning_rate"]),
                          epochs_schedule=tuple(int(e) for e in h["epochs_schedule"]),
                          seed=int(h["seed"]), hidden_width=int(h["hidden_width"]),
                          hidden_layers=int(h["hidden_layers"]), warm_start=bool(h["warm_start"]),
                          fresh_paths=bool(h["fresh_paths"]))
    spec = spec_from_manifest(manifest["net"])
    feature_count = int(manifest["feature_count"])

    param_bytes = sum(a * b + b for a, b in zip(spec.layer_dims()[:-1], spec.layer_dims()[1:])) * 8
    stages = []
    for n, name in enumerate(manifest["stage_files"]):
        blob = (src / name).read_bytes()
        expected = param_bytes + 2 * feature_count * 8
        if len(blob) != expected:
            raise ConfigError(f"{name} holds {len(blob)} bytes, expected {expected}")
        params = params_from_bytes(spec, blob[:param_bytes])
        tail = np.frombuffer(blob[param_bytes:], dtype="<f8").astype(float)
        normalizer = FeatureNormalizer(mean=tail[:feature_count].copy(),
                                       scale=tail[feature_count:].copy())
        stages.append(StageNetwork(step_index=n, spec=spec, params=params, normalizer=normalizer))

    history = None
    lengths = manifest.get("loss_history_lengths") or []
    hist_path = src / "loss_history.bin"
    if lengths and hist_path.exists():
        flat = np.frombuffer(hist_path.read_bytes(), dtype="<f8").astype(float)
        history, pos = [], 0
        for ln in lengths:
            history.append(flat[pos:pos + ln].copy())
            pos += ln
        history = tuple(history)

    return TrainedSolver(grid=grid, ou=ou, x0=np.asarray(manifest["x0"], dtype=float),
                         barriers=barriers, payoff=payoff, hyper=hyper, stages=tuple(stages),
                         final_losses=np.asarray(manifest["final_losses"], dtype=float),
                         loss_history=history)


def write_report_files(report: SolveReport, out_dir,
                       loss_history: tuple[np.ndarray, ...] | None = None) -> list[str]:
    """Write report.json plus the plot-ready CSV samples; returns filenames."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    write_json(out / "report.json", report.to_dict())
    written.append("report.json")

    write_csv(out / "y0_samples.csv", ["retrain", "y0"],
              ((i, v) for i, v in enumerate(report.y0_samples)))
    written.append("y0_samples.csv")

    rows = [("p1", t) for t in report.exit_times_p1] + [("p2", t) for t in report.exit_times_p2]
    write_csv(out / "exit_times.csv", ["player", "tau"], rows)
    written.append("exit_times.csv")

    if loss_history is not None:
        for n, hist in enumerate(loss_history):
            name = f"loss_history_stage_{n}.csv"
            write_csv(out / name, ["epoch", "loss"], ((e, v) for e, v in enumerate(hist)))
            written.append(name)
    return written
