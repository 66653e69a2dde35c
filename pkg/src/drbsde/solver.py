"""Backward-in-time neural solver for doubly reflected dynamics.

One network per time step, trained from the terminal step backwards: the
step-n network regresses the clamped step-(n+1) value onto its own
(value, gradient-head) outputs through the one-step Euler relation

    loss = mean | Yhat_{n+1} - (Ytilde_n - phi(t_n, X_n) dt + Zhat_n . dB_{n+1}) |^2 .

After training, the value estimate at every step is the network output
projected onto the barrier interval [-f2(t, x), f1(t, x)], exit times are
first barrier crossings of the raw (pre-clamp) output, and the game payoff
is evaluated by Monte Carlo over the induced stopping times.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import multiprocessing
import numpy as np

from .dynamics import (OUParams, PathBatch, SdeCoefficients, TimeGrid, derive_seed,
                       euler_panel, simulate_paths, standard_normal_block, _as_vector)
from .errors import ConfigError, NumericalError, TrainingError
from .nets import AdamState, MlpParams, MlpSpec, adam_step, backward, forward, init_params

__all__ = [
    "BarrierSpec",
    "PayoffSpec",
    "FeatureNormalizer",
    "StageNetwork",
    "TrainingHyper",
    "TrainedSolver",
    "Rollout",
    "SolveReport",
    "clamp_to_barriers",
    "stage_loss",
    "train_backward",
    "rollout",
    "extract_exit_indices",
    "extract_exit_times",
    "evaluate_payoff",
    "y0_distribution",
]


# ---------------------------------------------------------------------------
# Barriers and payoffs
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BarrierSpec:
    """Penalty pair (f1, f2); the value process is confined to [-f2, f1].

    "constant": f1 = gamma_upper, f2 = gamma_lower.
    "exp_decay": f1 = gamma_upper e^{-rate t}, f2 = gamma_lower e^{-rate t}.
    """

    kind: str
    gamma_upper: float
    gamma_lower: float
    decay_rate: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "exp_decay"):
            raise ConfigError(f"unknown barrier kind {self.kind!r}")
        if self.kind == "exp_decay":
            if not (self.gamma_upper > 0 and self.gamma_lower > 0 and self.decay_rate > 0):
                raise ConfigError("exp_decay barriers need positive gamma_upper, gamma_lower, decay_rate")
        else:
            # strict separation -f2 < f1 for all t
            if not self.gamma_upper + self.gamma_lower > 0:
                raise ConfigError("constant barriers must satisfy -gamma_lower < gamma_upper")
        for name in ("gamma_upper", "gamma_lower", "decay_rate"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")

    @classmethod
    def constant(cls, gamma_upper: float, gamma_lower: float | None = None) -> "BarrierSpec":
        if gamma_lower is None:
            gamma_lower = gamma_upper
        return cls(kind="constant", gamma_upper=float(gamma_upper), gamma_lower=float(gamma_lower))

    @classmethod
    def exp_decay(cls, gamma_upper: float, gamma_lower: float, decay_rate: float) -> "BarrierSpec":
        return cls(kind="exp_decay", gamma_upper=float(gamma_upper),
                   gamma_lower=float(gamma_lower), decay_rate=float(decay_rate))

    def _decay(self, t):
        if self.kind == "constant":
            return np.ones_like(np.asarray(t, dtype=float))
        return np.exp(-self.decay_rate * np.asarray(t, dtype=float))

    def f1(self, t, x=None):
        """Upper penalty (exit cost of the minimizing player)."""
        return self.gamma_upper * self._decay(t)

    def f2(self, t, x=None):
        """Lower penalty (exit cost of the maximizing player)."""
        return self.gamma_lower * self._decay(t)

    def upper(self, t, x=None):
        return self.f1(t, x)

    def lower(self, t, x=None):
        return -self.f2(t, x)

    def to_dict(self) -> dict:
        out = {"type": self.kind, "gamma_upper": self.gamma_upper, "gamma_lower": self.gamma_lower}
        if self.kind == "exp_decay":
            out["decay_rate"] = self.decay_rate
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "BarrierSpec":
        kind = data.get("type")
        if kind == "constant":
            return cls.constant(data["gamma_upper"], data["gamma_lower"])
        if kind == "exp_decay":
            return cls.exp_decay(data["gamma_upper"], data["gamma_lower"], data["decay_rate"])
        raise ConfigError(f"unknown barrier type {kind!r}")


@dataclass(frozen=True, eq=False)
class PayoffSpec:
    """Running payoff phi(t, x) and terminal payoff g(x).

    "symmetric_average": phi = -(alpha / d) sum_j x_j, g = 0.
    "cfd": phi = <weights, (strike - x)> e^{-rate t}, g = 0.
    "custom": user-supplied callables phi(t, x_batch) and g(x_batch).
    """

    kind: str
    alpha: float = 0.0
    weights: np.ndarray | None = None
    strike: np.ndarray | None = None
    discount_rate: float = 0.0
    phi_fn: object = None
    g_fn: object = None

    def __post_init__(self):
        if self.kind not in ("symmetric_average", "cfd", "custom"):
            raise ConfigError(f"unknown payoff kind {self.kind!r}")
        if self.kind == "cfd":
            w = np.asarray(self.weights, dtype=float)
            k = np.asarray(self.strike, dtype=float)
            if w.ndim != 1 or w.shape != k.shape:
                raise ConfigError("cfd weights and strike must be 1-d arrays of equal length")
            if abs(float(w.sum()) - 1.0) > 1e-9:
                raise ConfigError("cfd weights must sum to 1")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(k))):
                raise ConfigError("cfd weights and strike must be finite")
            w.flags.writeable = False
            k.flags.writeable = False
            object.__setattr__(self, "weights", w)
            object.__setattr__(self, "strike", k)

    @classmethod
    def symmetric_average(cls, alpha: float) -> "PayoffSpec":
        return cls(kind="symmetric_average", alpha=float(alpha))

    @classmethod
    def cfd(cls, weights, strike, discount_rate: float) -> "PayoffSpec":
        return cls(kind="cfd", weights=np.asarray(weights, dtype=float),
                   strike=np.asarray(strike, dtype=float), discount_rate=float(discount_rate))

    @classmethod
    def custom(cls, phi, g) -> "PayoffSpec":
        return cls(kind="custom", phi_fn=phi, g_fn=g)

    def running(self, t, x: np.ndarray) -> np.ndarray:
        """phi(t, x) for a batch x of shape (M, d)."""
        if self.kind == "symmetric_average":
            d = x.shape[1]
            return -(self.alpha / d) * x.sum(axis=1)
        if self.kind == "cfd":
            return ((self.strike - x) @ self.weights) * math.exp(-self.discount_rate * float(t))
        return np.asarray(self.phi_fn(t, x), dtype=float)

    def terminal(self, x: np.ndarray) -> np.ndarray:
        """g(x) for a batch x of shape (M, d)."""
        if self.kind == "custom" and self.g_fn is not None:
            return np.asarray(self.g_fn(x), dtype=float)
        return np.zeros(x.shape[0])

    def to_dict(self) -> dict:
        if self.kind == "symmetric_average":
            return {"type": self.kind, "alpha": self.alpha}
        if self.kind == "cfd":
            return {"type": self.kind, "weights": self.weights.tolist(),
                    "strike": self.strike.tolist(), "discount_rate": self.discount_rate}
        raise ConfigError("custom payoffs cannot be serialized")

    @classmethod
    def from_dict(cls, data: dict) -> "PayoffSpec":
        kind = data.get("type")
        if kind == "symmetric_average":
            return cls.symmetric_average(data["alpha"])
        if kind == "cfd":
            return cls.cfd(data["weights"], data["strike"], data["discount_rate"])
        raise ConfigError(f"unknown payoff type {kind!r}")


def clamp_to_barriers(y_tilde: np.ndarray, t, x, barriers: BarrierSpec) -> np.ndarray:
    """Project values onto [-f2(t, x), f1(t, x)] elementwise."""
    lo = -barriers.f2(t, x)
    hi = barriers.f1(t, x)
    if not np.all(lo < hi):
        raise NumericalError(f"barrier inversion at t={t}: lower {lo} >= upper {hi}")
    return np.clip(y_tilde, lo, hi)


def _check_barrier_separation(barriers: BarrierSpec, grid: TimeGrid) -> None:
    gap = barriers.f1(grid.nodes) + barriers.f2(grid.nodes)
    if not np.all(gap > 0):
        raise NumericalError("barriers are not strictly separated on the grid")


# ---------------------------------------------------------------------------
# Stage networks and training
# ---------------------------------------------------------------------------

def _features(t: float, x: np.ndarray) -> np.ndarray:
    """Network input: the time node followed by the state components."""
    out = np.empty((x.shape[0], x.shape[1] + 1))
    out[:, 0] = t
    out[:, 1:] = x
    return out


@dataclass(frozen=True, eq=False)
class FeatureNormalizer:
    """Per-feature shift/scale frozen from the first training batch."""

    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.scale))):
            raise NumericalError("normalizer statistics must be finite")
        if np.any(self.scale <= 0):
            raise NumericalError("normalizer scale must be positive")
        self.mean.flags.writeable = False
        self.scale.flags.writeable = False

    @classmethod
    def fit(cls, features: np.ndarray) -> "FeatureNormalizer":
        mean = features.mean(axis=0)
        scale = features.std(axis=0)
        # constant features (the time node, or the state at step 0) pass
        # through centered rather than dividing by ~0
        scale = np.where(scale < 1e-12, 1.0, scale)
        return cls(mean=mean, scale=scale)

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.scale


@dataclass(frozen=True, eq=False)
class StageNetwork:
    """Frozen per-step network: value head (column 0) and gradient head."""

    step_index: int
    spec: MlpSpec
    params: MlpParams
    normalizer: FeatureNormalizer

    def heads(self, t: float, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        feats = self.normalizer.apply(_features(t, x))
        out, _ = forward(self.params, feats)
        return out[:, 0], out[:, 1:]


@dataclass(frozen=True)
class TrainingHyper:
    """Training hyperparameters; defaults follow the reference experiments."""

    batch_size: int = 1024
    learning_rate: float = 1e-3
    epochs_schedule: tuple[int, ...] = (500, 500, 100)
    seed: int = 0
    hidden_width: int = 50
    hidden_layers: int = 3
    warm_start: bool = True
    fresh_paths: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.epochs_schedule or any(e < 1 for e in self.epochs_schedule):
            raise ConfigError("epochs_schedule must be non-empty positive integers")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ConfigError("learning_rate must be positive")

    def epochs_for(self, stage_rank: int) -> int:
        """Epoch count for the stage_rank-th trained stage (0 = last time step)."""
        sched = self.epochs_schedule
        return sched[min(stage_rank, len(sched) - 1)]


@dataclass(frozen=True, eq=False)
class TrainedSolver:
    grid: TimeGrid
    ou: OUParams | None
    x0: np.ndarray
    barriers: BarrierSpec
    payoff: PayoffSpec
    hyper: TrainingHyper
    stages: tuple[StageNetwork, ...]
    final_losses: np.ndarray
    loss_history: tuple[np.ndarray, ...] | None = None

    def __post_init__(self):
        if len(self.stages) != self.grid.steps:
            raise ConfigError("incomplete stage list")
        if not np.all(np.isfinite(self.final_losses)):
            raise NumericalError("non-finite final stage losses")

    def y_tilde0(self) -> float:
        """Raw value-head output at (t_0, x_0)."""
        y, _ = self.stages[0].heads(self.grid.nodes[0], self.x0[None, :])
        return float(y[0])

    def y0(self) -> float:
        """Estimated game value at time 0, clamped to the barrier interval."""
        y = np.array([self.y_tilde0()])
        return float(clamp_to_barriers(y, self.grid.nodes[0], self.x0[None, :], self.barriers)[0])


def _stage_prediction(params: MlpParams, normalizer: FeatureNormalizer, t_n: float,
                      x_n: np.ndarray, db: np.ndarray, phi_dt: np.ndarray):
    feats = normalizer.apply(_features(t_n, x_n))
    out, tape = forward(params, feats)
    pred = out[:, 0] - phi_dt + np.einsum("ij,ij->i", out[:, 1:], db)
    return pred, out, tape


def stage_loss(stage: StageNetwork, next_y_hat: np.ndarray, x_n: np.ndarray,
               db: np.ndarray, payoff: PayoffSpec, grid: TimeGrid):
    """Mean squared one-step residual of the backward recursion."""
    t_n = grid.nodes[stage.step_index]
    phi_dt = payoff.running(t_n, x_n) * grid.dt
    pred, _, tape = _stage_prediction(stage.params, stage.normalizer, t_n, x_n, db, phi_dt)
    resid = next_y_hat - pred
    return float(resid @ resid) / resid.shape[0], tape


def train_backward(grid: TimeGrid, coeffs: SdeCoefficients, x0, barriers: BarrierSpec,
                   payoff: PayoffSpec, hyper: TrainingHyper,
                   ou: OUParams | None = None) -> TrainedSolver:
    """Train the per-step networks from n = N-1 down to 0.

    Each epoch draws a fresh batch of forward paths (unless
    hyper.fresh_paths is off, in which case a fixed pool is reused), the
    step-(n+1) target comes from the frozen next-stage network projected
    onto the barriers, and one Adam step is taken on the stage loss. Stage
    n is frozen before stage n-1 starts.
    """
    x0 = _as_vector(x0, coeffs.dim, "x0")
    _check_barrier_separation(barriers, grid)
    n_steps = grid.steps
    dim = coeffs.dim
    dt = grid.dt
    sqrt_dt = math.sqrt(dt)
    nodes = grid.nodes
    m = hyper.batch_size
    spec = MlpSpec(input_dim=dim + 1, hidden_width=hyper.hidden_width,
                   hidden_layers=hyper.hidden_layers, output_dim=dim + 1)

    pool = None
    if not hyper.fresh_paths:
        pool = simulate_paths(coeffs, x0, grid, m, derive_seed(hyper.seed, 9))

    stages: list[StageNetwork | None] = [None] * n_steps
    history: list[np.ndarray | None] = [None] * n_steps
    params: MlpParams | None = None
    for rank, n in enumerate(range(n_steps - 1, -1, -1)):
        epochs = hyper.epochs_for(rank)
        if params is None or not hyper.warm_start:
            params = init_params(spec, derive_seed(hyper.seed, 1, n))
        adam = AdamState.init(params, lr=hyper.learning_rate)
        normalizer: FeatureNormalizer | None = None
        losses = np.empty(epochs)
        t_n = nodes[n]
        t_next = nodes[n + 1]
        for epoch in range(epochs):
            if pool is not None:
                x_n = pool.states[:, n, :]
                x_next = pool.states[:, n + 1, :]
                db = pool.increments[:, n, :]
            else:
                dw = standard_normal_block(derive_seed(hyper.seed, 2, n, epoch), (m, n + 1, dim))
                dw *= sqrt_dt
                panel = euler_panel(coeffs, x0, grid, dw)
                x_n = panel[:, n, :]
                x_next = panel[:, n + 1, :]
                db = dw[:, n, :]
            if normalizer is None:
                normalizer = FeatureNormalizer.fit(_features(t_n, x_n))
            if n == n_steps - 1:
                y_next = payoff.terminal(x_next)
            else:
                y_tilde_next, _ = stages[n + 1].heads(t_next, x_next)
                y_next = clamp_to_barriers(y_tilde_next, t_next, x_next, barriers)
            phi_dt = payoff.running(t_n, x_n) * dt
            pred, out, tape = _stage_prediction(params, normalizer, t_n, x_n, db, phi_dt)
            resid = y_next - pred
            loss = float(resid @ resid) / m
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged at stage {n}, epoch {epoch}")
            losses[epoch] = loss
            gpred = (-2.0 / m) * resid
            out_grad = np.empty_like(out)
            out_grad[:, 0] = gpred
            out_grad[:, 1:] = gpred[:, None] * db
            grads = backward(params, tape, out_grad)
            params, adam = adam_step(params, grads, adam)
        stages[n] = StageNetwork(step_index=n, spec=spec, params=params, normalizer=normalizer)
        history[n] = losses

    return TrainedSolver(grid=grid, ou=ou, x0=x0, barriers=barriers, payoff=payoff,
                         hyper=hyper, stages=tuple(stages),
                         final_losses=np.array([h[-1] for h in history]),
                         loss_history=tuple(history))


# ---------------------------------------------------------------------------
# Rollout, exit times, payoff evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Rollout:
    """Per-path value process along a batch of forward paths.

    y_tilde holds the raw value-head outputs (steps 0..N-1), y_hat the
    clamped values with y_hat[:, N] = g(X_N), z the gradient-head outputs.
    """

    paths: PathBatch
    y_tilde: np.ndarray  # (M, N)
    y_hat: np.ndarray    # (M, N+1)
    z: np.ndarray        # (M, N, d)


def rollout(solver: TrainedSolver, paths: PathBatch) -> Rollout:
    if paths.grid != solver.grid:
        raise ConfigError("path batch grid does not match the solver grid")
    if paths.dim != solver.x0.shape[0]:
        raise ConfigError("path batch dimension does not match the solver")
    n_steps = solver.grid.steps
    nodes = solver.grid.nodes
    m = paths.n_paths
    y_tilde = np.empty((m, n_steps))
    y_hat = np.empty((m, n_steps + 1))
    z = np.empty((m, n_steps, paths.dim))
    for n in range(n_steps):
        x_n = paths.states[:, n, :]
        yt, zn = solver.stages[n].heads(nodes[n], x_n)
        y_tilde[:, n] = yt
        z[:, n, :] = zn
        y_hat[:, n] = clamp_to_barriers(yt, nodes[n], x_n, solver.barriers)
    y_hat[:, n_steps] = solver.payoff.terminal(paths.states[:, n_steps, :])
    return Rollout(paths=paths, y_tilde=y_tilde, y_hat=y_hat, z=z)


def _first_true_index(mask: np.ndarray, sentinel: int) -> np.ndarray:
    hit = mask.any(axis=1)
    idx = mask.argmax(axis=1)
    return np.where(hit, idx, sentinel)


def extract_exit_indices(roll: Rollout, barriers: BarrierSpec) -> tuple[np.ndarray, np.ndarray]:
    """First grid index where the raw value crosses each barrier; N if never.

    Crossing is detected on the pre-clamp output (y_tilde >= f1 for the
    upper barrier, y_tilde <= -f2 for the lower one), which is equivalent
    to post-clamp equality without comparing floats for equality.
    """
    grid = roll.paths.grid
    n_steps = grid.steps
    t = grid.nodes[:n_steps]
    upper = roll.y_tilde >= barriers.f1(t)[None, :]
    lower = roll.y_tilde <= -barriers.f2(t)[None, :]
    both = upper & lower
    if both.any():
        raise NumericalError("value crossed both barriers at once; barriers are not separated")
    return _first_true_index(upper, n_steps), _first_true_index(lower, n_steps)


def extract_exit_times(roll: Rollout, barriers: BarrierSpec,
                       grid: TimeGrid) -> tuple[np.ndarray, np.ndarray]:
    """Per-path first barrier-touch times (tau1 upper, tau2 lower), else T."""
    idx1, idx2 = extract_exit_indices(roll, barriers)
    return grid.nodes[idx1], grid.nodes[idx2]


def _times_to_indices(times: np.ndarray, grid: TimeGrid) -> np.ndarray:
    idx = np.rint(np.asarray(times, dtype=float) / grid.dt).astype(int)
    if np.any(idx < 0) or np.any(idx > grid.steps):
        raise ConfigError("stopping times outside [0, T]")
    if not np.allclose(grid.nodes[idx], times, rtol=0.0, atol=1e-9 * max(grid.horizon, 1.0)):
        raise ConfigError("stopping times are not grid-aligned")
    return idx


def evaluate_payoff(paths: PathBatch, tau1: np.ndarray, tau2: np.ndarray,
                    payoff: PayoffSpec, barriers: BarrierSpec) -> tuple[float, float]:
    """Monte Carlo estimate of the game payoff under the given stopping times.

    J = mean over paths of
        sum_{t_i < tau1 ^ tau2} phi(t_i, X_i) dt                (left endpoint)
        + f1(tau1, X_{tau1})  if tau1 <= tau2 and tau1 < T
        - f2(tau2, X_{tau2})  if tau2 < tau1
        + g(X_T)              if tau1 ^ tau2 = T.
    """
    grid = paths.grid
    n_steps = grid.steps
    m = paths.n_paths
    idx1 = _times_to_indices(tau1, grid)
    idx2 = _times_to_indices(tau2, grid)
    idx_min = np.minimum(idx1, idx2)

    phi_panel = np.empty((m, n_steps))
    for i in range(n_steps):
        phi_panel[:, i] = payoff.running(grid.nodes[i], paths.states[:, i, :])
    cum = np.zeros((m, n_steps + 1))
    np.cumsum(phi_panel, axis=1, out=cum[:, 1:])
    rows = np.arange(m)
    total = cum[rows, idx_min] * grid.dt

    p1 = (idx1 <= idx2) & (idx1 < n_steps)
    p2 = idx2 < idx1
    if p1.any():
        x_exit = paths.states[rows[p1], idx1[p1], :]
        total[p1] += barriers.f1(grid.nodes[idx1[p1]], x_exit)
    if p2.any():
        x_exit = paths.states[rows[p2], idx2[p2], :]
        total[p2] -= barriers.f2(grid.nodes[idx2[p2]], x_exit)
    done = ~(p1 | p2)
    if done.any():
        total[done] += payoff.terminal(paths.states[done, n_steps, :])

    j = float(total.mean())
    se = float(total.std(ddof=1) / math.sqrt(m)) if m > 1 else float("nan")
    return j, se


def barrier_overshoot(roll: Rollout, barriers: BarrierSpec) -> float:
    """Largest pre-clamp excursion beyond the barriers (diagnostic)."""
    grid = roll.paths.grid
    t = grid.nodes[:grid.steps]
    over = np.maximum(roll.y_tilde - barriers.f1(t)[None, :], 0.0)
    under = np.maximum(-barriers.f2(t)[None, :] - roll.y_tilde, 0.0)
    return float(max(over.max(), under.max()))


# ---------------------------------------------------------------------------
# Retrain distribution
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SolveReport:
    """Aggregate of value estimates and exit statistics across retrains."""

    y0_samples: np.ndarray
    y0_sample_kind: str
    exit_times_p1: np.ndarray          # all tau1 samples pooled over retrains
    exit_times_p2: np.ndarray
    realized_exit_times_p1: np.ndarray  # tau1 on paths actually ended by player 1
    realized_exit_times_p2: np.ndarray
    no_exit_fraction: float
    exit_fraction_p1: float            # realized first exits by the upper barrier
    exit_fraction_p2: float
    mean_exit_time: float              # conditional on an exit; nan if none
    payoff_estimate: float
    payoff_se: float
    barrier_violation_max: float
    n_retrains: int
    eval_paths_per_retrain: int

    def to_dict(self) -> dict:
        return {
            "y0_samples": self.y0_samples.tolist(),
            "y0_sample_kind": self.y0_sample_kind,
            "y0_mean": float(self.y0_samples.mean()),
            "y0_std": float(self.y0_samples.std(ddof=1)) if self.y0_samples.size > 1 else 0.0,
            "no_exit_fraction": self.no_exit_fraction,
            "exit_fraction_p1": self.exit_fraction_p1,
            "exit_fraction_p2": self.exit_fraction_p2,
            "mean_exit_time": self.mean_exit_time,
            "payoff_estimate": self.payoff_estimate,
            "payoff_se": self.payoff_se,
            "barrier_violation_max": self.barrier_violation_max,
            "n_retrains": self.n_retrains,
            "eval_paths_per_retrain": self.eval_paths_per_retrain,
        }


def evaluate_solver(solver: TrainedSolver, coeffs: SdeCoefficients, eval_paths: int,
                    eval_seed: int) -> dict:
    """Roll a trained solver over fresh paths and gather exit statistics."""
    paths = simulate_paths(coeffs, solver.x0, solver.grid, eval_paths, eval_seed)
    roll = rollout(solver, paths)
    idx1, idx2 = extract_exit_indices(roll, solver.barriers)
    n_steps = solver.grid.steps
    nodes = solver.grid.nodes
    tau1 = nodes[idx1]
    tau2 = nodes[idx2]
    j, se = evaluate_payoff(paths, tau1, tau2, solver.payoff, solver.barriers)
    p1 = (idx1 <= idx2) & (idx1 < n_steps)
    p2 = idx2 < idx1
    idx_min = np.minimum(idx1, idx2)
    exited = idx_min < n_steps
    return {
        "y0": solver.y0(),
        "tau1": tau1,
        "tau2": tau2,
        "tau1_realized": tau1[p1],
        "tau2_realized": tau2[p2],
        "exit_fraction_p1": float(p1.mean()),
        "exit_fraction_p2": float(p2.mean()),
        "no_exit_fraction": float(1.0 - p1.mean() - p2.mean()),
        "mean_exit_time": float(nodes[idx_min[exited]].mean()) if exited.any() else float("nan"),
        "payoff_estimate": j,
        "payoff_se": se,
        "barrier_violation_max": barrier_overshoot(roll, solver.barriers),
        "final_losses": solver.final_losses,
        "loss_history": solver.loss_history,
    }


def _retrain_task(args) -> dict:
    (grid, ou, x0, barriers, payoff, hyper, train_seed, eval_paths, eval_seed) = args
    coeffs = ou.coefficients()
    hyper_r = replace(hyper, seed=train_seed)
    solver = train_backward(grid, coeffs, x0, barriers, payoff, hyper_r, ou=ou)
    out = evaluate_solver(solver, coeffs, eval_paths, eval_seed)
    out.pop("loss_history")
    return out


def default_workers() -> int:
    env = os.environ.get("DRBSDE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"DRBSDE_THREADS must be an integer, got {env!r}")
    return 1


def y0_distribution(grid: TimeGrid, ou: OUParams, x0, barriers: BarrierSpec,
                    payoff: PayoffSpec, hyper: TrainingHyper, retrains: int,
                    base_seed: int | None = None, eval_paths: int = 2 ** 14,
                    workers: int | None = None) -> SolveReport:
    """Retrain the solver ``retrains`` times with distinct seeds and aggregate.

    Results do not depend on the worker count: retrain r always uses seeds
    derived from (base_seed, r) and aggregation is in retrain order.
    """
    if retrains < 1:
        raise ConfigError("retrains must be >= 1")
    if base_seed is None:
        base_seed = hyper.seed
    x0 = _as_vector(x0, ou.dim, "x0")
    tasks = [
        (grid, ou, x0, barriers, payoff, hyper,
         derive_seed(base_seed, 100 + r), eval_paths, derive_seed(base_seed, 500 + r))
        for r in range(retrains)
    ]
    if workers is None:
        workers = default_workers()
    if workers > 1 and retrains > 1:
        results = _run_parallel(tasks, workers)
    else:
        results = []
        for i, task in enumerate(tasks):
            try:
                results.append(_retrain_task(task))
            except NumericalError as exc:
                raise TrainingError(f"retrain {i} failed: {exc}") from exc

    y0 = np.array([r["y0"] for r in results])
    tau1 = np.concatenate([r["tau1"] for r in results])
    tau2 = np.concatenate([r["tau2"] for r in results])
    tau1_realized = np.concatenate([r["tau1_realized"] for r in results])
    tau2_realized = np.concatenate([r["tau2_realized"] for r in results])
    exits = np.array([[r["exit_fraction_p1"], r["exit_fraction_p2"], r["no_exit_fraction"]]
                      for r in results])
    mean_exits = np.array([r["mean_exit_time"] for r in results])
    with_exit = np.isfinite(mean_exits)
    payoffs = np.array([r["payoff_estimate"] for r in results])
    return SolveReport(
        y0_samples=y0,
        y0_sample_kind="per_retrain",
        exit_times_p1=tau1,
        exit_times_p2=tau2,
        realized_exit_times_p1=tau1_realized,
        realized_exit_times_p2=tau2_realized,
        no_exit_fraction=float(exits[:, 2].mean()),
        exit_fraction_p1=float(exits[:, 0].mean()),
        exit_fraction_p2=float(exits[:, 1].mean()),
        mean_exit_time=float(mean_exits[with_exit].mean()) if with_exit.any() else float("nan"),
        payoff_estimate=float(payoffs.mean()),
        payoff_se=float(payoffs.std(ddof=1) / math.sqrt(len(payoffs))) if len(payoffs) > 1
        else float(results[0]["payoff_se"]),
        barrier_violation_max=float(max(r["barrier_violation_max"] for r in results)),
        n_retrains=retrains,
        eval_paths_per_retrain=eval_paths,
    )


def _run_parallel(tasks, workers: int) -> list[dict]:
    # spawn so the children initialize BLAS with a single thread each
    thread_vars = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS")
    saved = {k: os.environ.get(k) for k in thread_vars}
    os.environ.update({k: "1" for k in thread_vars})
    try:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            return list(pool.map(_retrain_task, tasks))
    finally:
        for k, v in saved.items():
            if v is None:
                os.environ.pop(k, None)
            else:
                os.environ[k] = v
