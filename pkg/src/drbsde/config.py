"""Experiment configuration: versioned JSON schema, validation, resolution.

Unknown keys are rejected (they are almost always typos in hyperparameter
names). Randomized quantities declared in the config (mean-reversion rates
drawn from a range, the strike offset) are resolved once from their own
seeds; the resolved values are reported so a run can be reproduced.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import OUParams, TimeGrid
from .errors import ConfigError
from .solver import BarrierSpec, PayoffSpec, TrainingHyper

__all__ = [
    "GameSetup",
    "load_config",
    "validate_config",
    "resolve_game",
    "resolve_hyper",
    "resolve_evaluation",
    "resolve_oracle_options",
    "config_digest",
    "bundled_config_path",
]

SCHEMA_VERSION = 1

_GAME_KEYS = {"dimension", "horizon", "steps", "x0", "ou", "barriers", "payoff"}
_OU_KEYS = {"kappa", "mu", "sigma"}
_KAPPA_DRAW_KEYS = {"uniform_range", "seed"}
_BARRIER_KEYS = {"type", "gamma_upper", "gamma_lower", "decay_rate"}
_PAYOFF_KEYS = {"type", "alpha", "weights", "strike", "discount_rate"}
_STRIKE_DRAW_KEYS = {"offset_range", "seed"}
_TRAINING_KEYS = {"batch_size", "learning_rate", "epochs_schedule", "retrains", "seed",
                  "warm_start", "fresh_paths", "hidden_width", "hidden_layers"}
_EVAL_KEYS = {"paths", "seed", "export_paths"}
_ORACLE_KEYS = {"n_nodes", "quad_order", "half_width_sds", "transition", "interpolation"}
_TOP_KEYS = {"schema_version", "name", "game", "training", "evaluation", "oracle"}


def _check_keys(obj: dict, allowed: set[str], path: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{path} must be an object")
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"unknown key {path}.{unknown[0]!r}")


def validate_config(cfg: dict) -> None:
    _check_keys(cfg, _TOP_KEYS, "config")
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"config.schema_version must be {SCHEMA_VERSION}")
    if "game" not in cfg:
        raise ConfigError("config.game is required")
    game = cfg["game"]
    _check_keys(game, _GAME_KEYS, "config.game")
    for key in ("dimension", "horizon", "steps", "ou", "barriers", "payoff"):
        if key not in game:
            raise ConfigError(f"config.game.{key} is required")
    _check_keys(game["ou"], _OU_KEYS, "config.game.ou")
    if isinstance(game["ou"].get("kappa"), dict):
        _check_keys(game["ou"]["kappa"], _KAPPA_DRAW_KEYS, "config.game.ou.kappa")
    _check_keys(game["barriers"], _BARRIER_KEYS, "config.game.barriers")
    _check_keys(game["payoff"], _PAYOFF_KEYS, "config.game.payoff")
    if isinstance(game["payoff"].get("strike"), dict):
        _check_keys(game["payoff"]["strike"], _STRIKE_DRAW_KEYS, "config.game.payoff.strike")
    if "training" in cfg:
        _check_keys(cfg["training"], _TRAINING_KEYS, "config.training")
    if "evaluation" in cfg:
        _check_keys(cfg["evaluation"], _EVAL_KEYS, "config.evaluation")
    if "oracle" in cfg:
        _check_keys(cfg["oracle"], _ORACLE_KEYS, "config.oracle")


def load_config(path) -> dict:
    p = Path(path)
    try:
        cfg = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    validate_config(cfg)
    return cfg


def config_digest(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True, eq=False)
class GameSetup:
    grid: TimeGrid
    ou: OUParams
    x0: np.ndarray
    barriers: BarrierSpec
    payoff: PayoffSpec
    resolved: dict


def _vector_from(value, dim: int, path: str) -> np.ndarray:
    if isinstance(value, (int, float)):
        return np.full(dim, float(value))
    arr = np.asarray(value, dtype=float)
    if arr.shape != (dim,):
        raise ConfigError(f"{path} must be a scalar or a list of length {dim}")
    return arr


def resolve_game(cfg: dict) -> GameSetup:
    game = cfg["game"]
    dim = int(game["dimension"])
    if dim < 1:
        raise ConfigError("config.game.dimension must be >= 1")
    grid = TimeGrid(float(game["horizon"]), int(game["steps"]))
    resolved: dict = {}

    kappa_cfg = game["ou"]["kappa"]
    if isinstance(kappa_cfg, dict):
        lo, hi = (float(v) for v in kappa_cfg["uniform_range"])
        rng = np.random.default_rng(int(kappa_cfg.get("seed", 0)))
        kappa = rng.uniform(lo, hi, size=dim)
        resolved["kappa"] = kappa.tolist()
    else:
        kappa = _vector_from(kappa_cfg, dim, "config.game.ou.kappa")
    mu = _vector_from(game["ou"]["mu"], dim, "config.game.ou.mu")
    sigma = _vector_from(game["ou"]["sigma"], dim, "config.game.ou.sigma")
    ou = OUParams.diagonal(kappa, mu, sigma, dim=dim)

    x0 = _vector_from(game.get("x0", 0.0), dim, "config.game.x0")
    barriers = BarrierSpec.from_dict(game["barriers"])

    pay = game["payoff"]
    kind = pay.get("type")
    if kind == "symmetric_average":
        payoff = PayoffSpec.symmetric_average(float(pay["alpha"]))
    elif kind == "cfd":
        weights = pay.get("weights", "uniform")
        if weights == "uniform":
            weights = np.full(dim, 1.0 / dim)
        else:
            weights = _vector_from(weights, dim, "config.game.payoff.weights")
        strike_cfg = pay["strike"]
        if isinstance(strike_cfg, dict):
            lo, hi = (float(v) for v in strike_cfg["offset_range"])
            rng = np.random.default_rng(int(strike_cfg.get("seed", 0)))
            strike = mu + rng.uniform(lo, hi, size=dim)
            resolved["strike"] = strike.tolist()
        else:
            strike = _vector_from(strike_cfg, dim, "config.game.payoff.strike")
        payoff = PayoffSpec.cfd(weights, strike, float(pay["discount_rate"]))
    else:
        raise ConfigError(f"unknown payoff type {kind!r} in config")

    return GameSetup(grid=grid, ou=ou, x0=x0, barriers=barriers, payoff=payoff,
                     resolved=resolved)


def resolve_hyper(cfg: dict) -> tuple[TrainingHyper, int]:
    """Training hyperparameters plus the retrain count."""
    tr = cfg.get("training", {})
    hyper = TrainingHyper(
        batch_size=int(tr.get("batch_size", 1024)),
        learning_rate=float(tr.get("learning_rate", 1e-3)),
        epochs_schedule=tuple(int(e) for e in tr.get("epochs_schedule", (500, 500, 100))),
        seed=int(tr.get("seed", 0)),
        hidden_width=int(tr.get("hidden_width", 50)),
        hidden_layers=int(tr.get("hidden_layers", 3)),
        warm_start=bool(tr.get("warm_start", True)),
        fresh_paths=bool(tr.get("fresh_paths", True)),
    )
    retrains = int(tr.get("retrains", 1))
    if retrains < 1:
        raise ConfigError("config.training.retrains must be >= 1")
    return hyper, retrains


def resolve_evaluation(cfg: dict) -> dict:
    ev = cfg.get("evaluation", {})
    return {
        "paths": int(ev.get("paths", 2 ** 14)),
        "seed": int(ev.get("seed", 1)),
        "export_paths": int(ev.get("export_paths", 8)),
    }


def resolve_oracle_options(cfg: dict) -> dict:
    oc = cfg.get("oracle", {})
    return {
        "n_nodes": int(oc.get("n_nodes", 401)),
        "quad_order": int(oc.get("quad_order", 32)),
        "half_width_sds": float(oc.get("half_width_sds", 8.0)),
        "transition": str(oc.get("transition", "euler")),
        "interpolation": str(oc.get("interpolation", "pchip")),
    }


def bundled_config_path(name: str) -> Path:
    """Locate a configuration shipped with the package by bare name."""
    base = Path(__file__).parent / "configs"
    candidate = base / (name if name.endswith(".json") else f"{name}.json")
    if not candidate.exists():
        available = sorted(p.stem for p in base.glob("*.json"))
        raise ConfigError(f"no bundled config {name!r}; available: {', '.join(available)}")
    return candidate
