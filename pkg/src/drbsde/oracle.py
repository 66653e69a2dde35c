"""Grid dynamic-programming reference solver for one-dimensional games.

Backward recursion on a spatial grid with Gauss-Hermite conditional
expectations under the one-step Gaussian transition:

    Ytilde_n(x) = E[ Y_{n+1}(X_{n+1}) | X_n = x ] + phi(t_n, x) dt,
    Y_n(x)      = min( max( Ytilde_n(x), -f2(t_n, x) ), f1(t_n, x) ),
    Z_n(x)      = E[ Y_{n+1}(X_{n+1}) dB ] / dt.

The default transition is the Euler-linearized Gaussian so the reference
shares the deep solver's discretization; the exact OU transition is
available for discretization-bias studies. A brute-force nested Monte
Carlo of the same recursion cross-checks the quadrature independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.interpolate import PchipInterpolator
from scipy.special import ndtr
from scipy.stats import ks_2samp

from .dynamics import OUParams, PathBatch, TimeGrid, derive_seed, standard_normal_block
from .errors import ConfigError, NumericalError
from .solver import (BarrierSpec, PayoffSpec, TrainedSolver, extract_exit_indices, rollout)

__all__ = [
    "GridSpec",
    "OracleSolution",
    "DeepOracleComparison",
    "grid_dp_solve",
    "nested_mc_solve",
    "compare_to_deep",
    "oracle_exit_indices",
]

COVERAGE_LIMIT = 1e-6


@dataclass(frozen=True)
class GridSpec:
    """Spatial grid and quadrature order for the 1-d reference solver."""

    x_min: float
    x_max: float
    n_nodes: int = 401
    quad_order: int = 32
    interpolation: str = "pchip"

    def __post_init__(self):
        if not self.x_max > self.x_min:
            raise ConfigError("x_max must exceed x_min")
        if self.n_nodes < 200:
            raise ConfigError("n_nodes must be >= 200")
        if self.quad_order < 16:
            raise ConfigError("quad_order must be >= 16")
        if self.interpolation not in ("pchip", "linear"):
            raise ConfigError(f"unknown interpolation {self.interpolation!r}")

    @classmethod
    def for_problem(cls, ou: OUParams, x0: float, half_width_sds: float = 8.0,
                    n_nodes: int = 401, quad_order: int = 32,
                    interpolation: str = "pchip") -> "GridSpec":
        kappa, sigma = _scalar_ou(ou)[0], _scalar_ou(ou)[2]
        mu = _scalar_ou(ou)[1]
        stat_sd = sigma / math.sqrt(2.0 * kappa)
        center = float(x0)
        lo = min(center, mu) - half_width_sds * stat_sd
        hi = max(center, mu) + half_width_sds * stat_sd
        return cls(x_min=lo, x_max=hi, n_nodes=n_nodes, quad_order=quad_order,
                   interpolation=interpolation)


def _scalar_ou(ou: OUParams) -> tuple[float, float, float]:
    if ou.dim != 1:
        raise ConfigError("the grid oracle supports d = 1 only")
    if not ou.is_diagonal:
        raise ConfigError("the grid oracle requires diagonal OU parameters")
    return float(ou.kappa[0, 0]), float(ou.mu[0]), float(ou.sigma[0, 0])


def _transition(ou: OUParams, xs: np.ndarray, dt: float, scheme: str):
    kappa, mu, sigma = _scalar_ou(ou)
    if scheme == "euler":
        mean = xs + kappa * (mu - xs) * dt
        sd = sigma * math.sqrt(dt)
    elif scheme == "exact":
        decay = math.exp(-kappa * dt)
        mean = mu + decay * (xs - mu)
        sd = sigma * math.sqrt(-math.expm1(-2.0 * kappa * dt) / (2.0 * kappa))
    else:
        raise ConfigError(f"unknown transition scheme {scheme!r}")
    return mean, sd


@dataclass(frozen=True, eq=False)
class OracleSolution:
    """Value surfaces on the grid plus stopping-region masks."""

    grid: TimeGrid
    xs: np.ndarray
    y: np.ndarray          # (N+1, K) clamped values, y[N] = g
    y_tilde: np.ndarray    # (N, K) pre-clamp continuation values
    z: np.ndarray          # (N, K)
    stop_upper: np.ndarray  # (N, K) bool, Ytilde >= f1
    stop_lower: np.ndarray  # (N, K) bool, Ytilde <= -f2
    y0: float
    x0: float
    barriers: BarrierSpec
    payoff: PayoffSpec
    transition: str
    interpolation: str

    def _interp(self, values: np.ndarray):
        if self.interpolation == "pchip":
            return PchipInterpolator(self.xs, values)
        return lambda q: np.interp(q, self.xs, values)

    def value_at(self, n: int, x) -> np.ndarray:
        """Clamped value surface Y_n interpolated at query points."""
        q = np.clip(np.asarray(x, dtype=float), self.xs[0], self.xs[-1])
        return np.asarray(self._interp(self.y[n])(q), dtype=float)

    def y_tilde_at(self, n: int, x) -> np.ndarray:
        """Pre-clamp continuation surface interpolated at query points."""
        q = np.clip(np.asarray(x, dtype=float), self.xs[0], self.xs[-1])
        return np.asarray(self._interp(self.y_tilde[n])(q), dtype=float)


def grid_dp_solve(ou: OUParams, grid: TimeGrid, gspec: GridSpec, barriers: BarrierSpec,
                  payoff: PayoffSpec, x0: float = 0.0,
                  transition: str = "euler") -> OracleSolution:
    """Backward dynamic programming on the spatial grid."""
    kappa, mu, sigma = _scalar_ou(ou)
    stat_sd = sigma / math.sqrt(2.0 * kappa)
    if gspec.x_min > x0 - 6.0 * stat_sd or gspec.x_max < x0 + 6.0 * stat_sd:
        raise ConfigError("grid bounds must cover x0 +/- 6 stationary standard deviations")

    n_steps = grid.steps
    dt = grid.dt
    nodes = grid.nodes
    xs = np.linspace(gspec.x_min, gspec.x_max, gspec.n_nodes)
    mean, sd = _transition(ou, xs, dt, transition)

    # transition mass may only leave the grid from outside the reporting core
    core = (xs >= x0 - 6.0 * stat_sd) & (xs <= x0 + 6.0 * stat_sd)
    if core.any():
        lost = ndtr((gspec.x_min - mean[core]) / sd) + ndtr((mean[core] - gspec.x_max) / sd)
        if float(lost.max()) > COVERAGE_LIMIT:
            raise NumericalError(
                f"probability mass {float(lost.max()):.3e} leaves the grid from the core region")

    u, w = hermgauss(gspec.quad_order)
    zq = math.sqrt(2.0) * u
    wq = w / math.sqrt(math.pi)
    points = np.clip(mean[:, None] + sd * zq[None, :], gspec.x_min, gspec.x_max)

    y = np.empty((n_steps + 1, gspec.n_nodes))
    y_tilde = np.empty((n_steps, gspec.n_nodes))
    z = np.empty((n_steps, gspec.n_nodes))
    stop_upper = np.zeros((n_steps, gspec.n_nodes), dtype=bool)
    stop_lower = np.zeros((n_steps, gspec.n_nodes), dtype=bool)

    xs_col = xs[:, None]
    y[n_steps] = payoff.terminal(xs_col)
    for n in range(n_steps - 1, -1, -1):
        if gspec.interpolation == "pchip":
            vals = PchipInterpolator(xs, y[n + 1])(points)
        else:
            vals = np.interp(points, xs, y[n + 1])
        cont = vals @ wq
        y_tilde[n] = cont + payoff.running(nodes[n], xs_col) * dt
        z[n] = ((vals * zq[None, :]) @ wq) / math.sqrt(dt)
        hi = barriers.f1(nodes[n])
        lo = -barriers.f2(nodes[n])
        stop_upper[n] = y_tilde[n] >= hi
        stop_lower[n] = y_tilde[n] <= lo
        y[n] = np.clip(y_tilde[n], lo, hi)

    if gspec.interpolation == "pchip":
        y0 = float(PchipInterpolator(xs, y[0])(x0))
    else:
        y0 = float(np.interp(x0, xs, y[0]))
    return OracleSolution(grid=grid, xs=xs, y=y, y_tilde=y_tilde, z=z,
                          stop_upper=stop_upper, stop_lower=stop_lower, y0=y0,
                          x0=float(x0), barriers=barriers, payoff=payoff,
                          transition=transition, interpolation=gspec.interpolation)


def nested_mc_solve(ou: OUParams, grid: TimeGrid, barriers: BarrierSpec, payoff: PayoffSpec,
                    samples_per_node: int, seed: int, x0: float = 0.0,
                    transition: str = "euler") -> tuple[float, float]:
    """Brute-force nested Monte Carlo of the same backward recursion.

    Cost grows as samples_per_node ** N, hence the N <= 5 limit. Returns
    the Y_0 estimate and the outer-level standard error.
    """
    n_steps = grid.steps
    if n_steps > 5:
        raise ConfigError("nested Monte Carlo is limited to N <= 5 steps")
    if samples_per_node < 2:
        raise ConfigError("samples_per_node must be >= 2")
    dt = grid.dt
    nodes = grid.nodes

    def recurse(n: int, x: np.ndarray) -> np.ndarray:
        if n == n_steps:
            return payoff.terminal(x[:, None])
        mean, sd = _transition(ou, x, dt, transition)
        draws = standard_normal_block(derive_seed(seed, n), (x.shape[0], samples_per_node))
        children = (mean[:, None] + sd * draws).ravel()
        child_vals = recurse(n + 1, children).reshape(x.shape[0], samples_per_node)
        cont = child_vals.mean(axis=1)
        ytilde = cont + payoff.running(nodes[n], x[:, None]) * dt
        return np.clip(ytilde, -barriers.f2(nodes[n]), barriers.f1(nodes[n]))

    x = np.array([float(x0)])
    mean, sd = _transition(ou, x, dt, transition)
    draws = standard_normal_block(derive_seed(seed, 0), (1, samples_per_node))
    children = (mean[:, None] + sd * draws).ravel()
    child_vals = recurse(1, children)
    cont = float(child_vals.mean())
    ytilde = cont + float(payoff.running(nodes[0], x[:, None])[0]) * dt
    estimate = float(np.clip(ytilde, -barriers.f2(nodes[0]), barriers.f1(nodes[0])))
    se = float(child_vals.std(ddof=1) / math.sqrt(samples_per_node))
    return estimate, se


def oracle_exit_indices(solution: OracleSolution, paths: PathBatch) -> tuple[np.ndarray, np.ndarray]:
    """First grid index where the oracle continuation surface crosses each
    barrier along each path; N if never."""
    if paths.grid != solution.grid:
        raise ConfigError("path batch grid does not match the oracle grid")
    if paths.dim != 1:
        raise ConfigError("oracle exit times require 1-d paths")
    n_steps = solution.grid.steps
    nodes = solution.grid.nodes
    m = paths.n_paths
    upper = np.zeros((m, n_steps), dtype=bool)
    lower = np.zeros((m, n_steps), dtype=bool)
    for n in range(n_steps):
        yt = solution.y_tilde_at(n, paths.states[:, n, 0])
        upper[:, n] = yt >= solution.barriers.f1(nodes[n])
        lower[:, n] = yt <= -solution.barriers.f2(nodes[n])
    hit1 = upper.any(axis=1)
    hit2 = lower.any(axis=1)
    idx1 = np.where(hit1, upper.argmax(axis=1), n_steps)
    idx2 = np.where(hit2, lower.argmax(axis=1), n_steps)
    return idx1, idx2


@dataclass(frozen=True)
class DeepOracleComparison:
    y0_deep: float
    y0_oracle: float
    y0_gap: float
    path_rmse: float
    ks_exit_combined: float
    ks_exit_p1: float
    ks_exit_p2: float


def compare_to_deep(solution: OracleSolution, solver: TrainedSolver,
                    eval_paths: PathBatch) -> DeepOracleComparison:
    """Error report of a trained solver against the grid reference."""
    if solver.grid != solution.grid:
        raise ConfigError("solver and oracle grids differ")
    if solver.x0.shape[0] != 1:
        raise ConfigError("oracle comparison requires a 1-d solver")
    if solver.barriers.to_dict() != solution.barriers.to_dict():
        raise ConfigError("solver and oracle barriers differ")

    roll = rollout(solver, eval_paths)
    n_steps = solution.grid.steps
    nodes = solution.grid.nodes

    oracle_vals = np.empty_like(roll.y_hat)
    for n in range(n_steps + 1):
        oracle_vals[:, n] = solution.value_at(n, eval_paths.states[:, n, 0])
    path_rmse = float(np.sqrt(np.mean((roll.y_hat - oracle_vals) ** 2)))

    d_idx1, d_idx2 = extract_exit_indices(roll, solver.barriers)
    o_idx1, o_idx2 = oracle_exit_indices(solution, eval_paths)
    deep_min = nodes[np.minimum(d_idx1, d_idx2)]
    oracle_min = nodes[np.minimum(o_idx1, o_idx2)]

    def ks_dist(a, b) -> float:
        return float(ks_2samp(a, b, method="asymp").statistic)

    y0_deep = solver.y0()
    return DeepOracleComparison(
        y0_deep=y0_deep,
        y0_oracle=solution.y0,
        y0_gap=abs(y0_deep - solution.y0),
        path_rmse=path_rmse,
        ks_exit_combined=ks_dist(deep_min, oracle_min),
        ks_exit_p1=ks_dist(nodes[d_idx1], nodes[o_idx1]),
        ks_exit_p2=ks_dist(nodes[d_idx2], nodes[o_idx2]),
    )
