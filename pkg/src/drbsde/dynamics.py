"""Time grids, Euler-Maruyama forward simulation, and OU transitions.

All floating point is 64-bit. Gaussian noise comes from a counter-based
Philox stream drawn in path-major order, so the draws attached to path j
do not depend on how many paths are simulated alongside it (batch-layout
independence) nor on any parallel execution order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError

__all__ = [
    "TimeGrid",
    "OUParams",
    "SdeCoefficients",
    "OUCoefficients",
    "PathBatch",
    "build_time_grid",
    "standard_normal_block",
    "derive_seed",
    "euler_panel",
    "simulate_paths",
    "ou_exact_conditional",
]

_MASK64 = (1 << 64) - 1


def derive_seed(*parts: int) -> int:
    """Stable 64-bit sub-seed from a tuple of integers.

    Uses numpy's SeedSequence hashing, which is specified and stable across
    platforms and releases.
    """
    ss = np.random.SeedSequence([int(p) & _MASK64 for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def standard_normal_block(seed: int, shape: tuple[int, ...]) -> np.ndarray:
    """Draw standard normals from a Philox stream keyed by ``seed``.

    The block is filled in C order; for a path-major shape (M, steps, dim)
    the slice for path j occupies a fixed stream position independent of M.
    """
    gen = np.random.Generator(np.random.Philox(key=int(seed) & _MASK64))
    return gen.standard_normal(shape)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < t_1 < ... < t_N = T."""

    horizon: float
    steps: int
    nodes: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (isinstance(self.steps, (int, np.integer)) and self.steps >= 1):
            raise ConfigError(f"steps must be a positive integer, got {self.steps!r}")
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            raise ConfigError(f"horizon must be positive and finite, got {self.horizon!r}")
        nodes = np.linspace(0.0, float(self.horizon), self.steps + 1)
        nodes.flags.writeable = False
        object.__setattr__(self, "nodes", nodes)

    @property
    def dt(self) -> float:
        return float(self.horizon) / self.steps


def build_time_grid(horizon: float, steps: int) -> TimeGrid:
    return TimeGrid(float(horizon), int(steps))


def _as_vector(value, dim: int, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.ndim != 1:
        raise ConfigError(f"{name} must be a scalar or 1-d array")
    if arr.size == 1 and dim > 1:
        arr = np.full(dim, float(arr[0]))
    if arr.size != dim:
        raise ConfigError(f"{name} has length {arr.size}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} must be finite")
    return arr


@dataclass(frozen=True, eq=False)
class OUParams:
    """Mean-reverting dynamics dX = kappa (mu - X) dt + sigma dB.

    ``kappa`` and ``sigma`` are d x d matrices; the diagonal case carries
    fast paths for simulation and is the only one supported by exact
    transitions and calibration.
    """

    kappa: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        kappa = np.asarray(self.kappa, dtype=float)
        sigma = np.asarray(self.sigma, dtype=float)
        mu = np.asarray(self.mu, dtype=float)
        if kappa.ndim != 2 or kappa.shape[0] != kappa.shape[1]:
            raise ConfigError("kappa must be a square matrix")
        d = kappa.shape[0]
        if sigma.shape != (d, d):
            raise ConfigError(f"sigma must be {d}x{d}, got {sigma.shape}")
        if mu.shape != (d,):
            raise ConfigError(f"mu must have shape ({d},), got {mu.shape}")
        if not (np.all(np.isfinite(kappa)) and np.all(np.isfinite(sigma)) and np.all(np.isfinite(mu))):
            raise ConfigError("OU parameters must be finite")
        if self._is_diag(kappa):
            if np.any(np.diag(kappa) <= 0):
                raise ConfigError("diagonal kappa entries must be positive")
        else:
            sym = 0.5 * (kappa + kappa.T)
            if np.any(np.linalg.eigvalsh(sym) <= 0):
                raise ConfigError("kappa must be positive definite (symmetric part)")
        for name, arr in (("kappa", kappa), ("mu", mu), ("sigma", sigma)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @staticmethod
    def _is_diag(m: np.ndarray) -> bool:
        return np.count_nonzero(m - np.diag(np.diag(m))) == 0

    @classmethod
    def diagonal(cls, kappa, mu, sigma, dim: int | None = None) -> "OUParams":
        """Build from per-component kappa/mu/sigma (scalars broadcast)."""
        if dim is None:
            dim = max(np.atleast_1d(np.asarray(v, dtype=float)).size for v in (kappa, mu, sigma))
        k = _as_vector(kappa, dim, "kappa")
        m = _as_vector(mu, dim, "mu")
        s = _as_vector(sigma, dim, "sigma")
        return cls(np.diag(k), m, np.diag(s))

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def is_diagonal(self) -> bool:
        return self._is_diag(self.kappa) and self._is_diag(self.sigma)

    def coefficients(self) -> "OUCoefficients":
        return OUCoefficients(self)


class SdeCoefficients:
    """Abstract drift/diffusion evaluation for dX = b(t,X) dt + sigma(t,X) dB.

    Implementations must be deterministic and side-effect free; both methods
    take a batch of states with shape (M, dim).
    """

    dim: int

    def drift(self, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def apply_diffusion(self, t: float, x: np.ndarray, dw: np.ndarray) -> np.ndarray:
        """Return sigma(t, x) @ dw row-wise, shape (M, dim)."""
        raise NotImplementedError


class OUCoefficients(SdeCoefficients):
    def __init__(self, params: OUParams):
        self.params = params
        self.dim = params.dim
        self._diag = params.is_diagonal
        if self._diag:
            self._kdiag = np.diag(params.kappa).copy()
            self._sdiag = np.diag(params.sigma).copy()

    def drift(self, t: float, x: np.ndarray) -> np.ndarray:
        if self._diag:
            return self._kdiag * (self.params.mu - x)
        return (self.params.mu - x) @ self.params.kappa.T

    def apply_diffusion(self, t: float, x: np.ndarray, dw: np.ndarray) -> np.ndarray:
        if self._diag:
            return self._sdiag * dw
        return dw @ self.params.sigma.T


@dataclass(frozen=True, eq=False)
class PathBatch:
    """M forward paths on a grid plus the Brownian increments that drove them.

    Immutable after construction; arrays are marked read-only and safe to
    share across threads.
    """

    grid: TimeGrid
    states: np.ndarray      # (M, N+1, d)
    increments: np.ndarray  # (M, N, d)
    seed: int

    def __post_init__(self):
        n = self.grid.steps
        if self.states.ndim != 3 or self.increments.ndim != 3:
            raise ConfigError("states and increments must be 3-d arrays")
        if self.states.shape[1] != n + 1 or self.increments.shape[1] != n:
            raise ConfigError("array step counts do not match the grid")
        if self.states.shape[0] != self.increments.shape[0] or self.states.shape[2] != self.increments.shape[2]:
            raise ConfigError("states and increments shapes are inconsistent")
        self.states.flags.writeable = False
        self.increments.flags.writeable = False

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[2]


def euler_panel(coeffs: SdeCoefficients, x0: np.ndarray, grid: TimeGrid,
                increments: np.ndarray) -> np.ndarray:
    """Run the Euler-Maruyama recursion for given Brownian increments.

    X_{n+1} = X_n + b(t_n, X_n) dt + sigma(t_n, X_n) dB_{n+1}; increments may
    cover fewer steps than the grid (partial panels for backward training).
    """
    n_paths, n_steps, dim = increments.shape
    if dim != coeffs.dim:
        raise ConfigError(f"increment dim {dim} != coefficient dim {coeffs.dim}")
    if n_steps > grid.steps:
        raise ConfigError("more increment steps than grid steps")
    dt = grid.dt
    nodes = grid.nodes
    states = np.empty((n_paths, n_steps + 1, dim))
    states[:, 0, :] = x0
    if isinstance(coeffs, OUCoefficients) and coeffs._diag:
        # fused diagonal step X_{n+1} = (1 - kappa dt) X_n + kappa mu dt + sigma dB
        decay = 1.0 - coeffs._kdiag * dt
        pull = coeffs._kdiag * coeffs.params.mu * dt
        scale = coeffs._sdiag
        noise = np.empty((n_paths, dim))
        for i in range(n_steps):
            nxt = states[:, i + 1, :]
            np.multiply(states[:, i, :], decay, out=nxt)
            nxt += pull
            np.multiply(increments[:, i, :], scale, out=noise)
            nxt += noise
    else:
        for i in range(n_steps):
            xi = states[:, i, :]
            states[:, i + 1, :] = xi + coeffs.drift(nodes[i], xi) * dt \
                + coeffs.apply_diffusion(nodes[i], xi, increments[:, i, :])
    if not np.all(np.isfinite(states[:, -1, :])):
        for i in range(1, n_steps + 1):
            if not np.all(np.isfinite(states[:, i, :])):
                raise NumericalError(f"non-finite state produced at step {i} of the Euler recursion")
    return states


def simulate_paths(coeffs: SdeCoefficients, x0, grid: TimeGrid, n_paths: int,
                   seed: int) -> PathBatch:
    """Simulate M paths over the whole grid, reproducible from the seed."""
    if n_paths < 1:
        raise ConfigError(f"n_paths must be >= 1, got {n_paths}")
    x0 = _as_vector(x0, coeffs.dim, "x0")
    dw = standard_normal_block(seed, (n_paths, grid.steps, coeffs.dim))
    dw *= math.sqrt(grid.dt)
    states = euler_panel(coeffs, x0, grid, dw)
    return PathBatch(grid=grid, states=states, increments=dw, seed=int(seed))


def ou_exact_conditional(params: OUParams, x, dt: float, scheme: str = "exact"):
    """Per-component conditional Gaussian (mean, stddev) of a diagonal OU step.

    scheme="exact" uses the closed-form transition
        mean = mu + exp(-kappa dt) (x - mu),  var = sigma^2 (1 - exp(-2 kappa dt)) / (2 kappa);
    scheme="euler" uses the linearized transition the calibration and the
    discrete-time solvers are built on:
        mean = x + kappa (mu - x) dt,  sd = sigma sqrt(dt).
    """
    if not params.is_diagonal:
        raise ConfigError("exact conditional transitions require diagonal kappa and sigma")
    if dt < 0:
        raise ConfigError("dt must be non-negative")
    kdiag = np.diag(params.kappa)
    sdiag = np.diag(params.sigma)
    x = np.asarray(x, dtype=float)
    if scheme == "euler":
        mean = x + kdiag * (params.mu - x) * dt
        sd = sdiag * math.sqrt(dt) * np.ones_like(mean)
    elif scheme == "exact":
        decay = np.exp(-kdiag * dt)
        mean = params.mu + decay * (x - params.mu)
        var = sdiag ** 2 * (-np.expm1(-2.0 * kdiag * dt)) / (2.0 * kdiag)
        sd = np.sqrt(var) * np.ones_like(mean)
    else:
        raise ConfigError(f"unknown transition scheme {scheme!r}")
    return mean, sd
