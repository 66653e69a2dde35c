"""Reflection reconstruction on a two-sided time-varying barrier.

Given a free (unreflected) driver path x and barrier samples alpha <= beta,
the net push Xi confining x to [alpha, beta] is assembled from the two
sup-inf path functionals

    H(t) = max_{s<=t} [ (x_s - beta_s) ^ min_{s<=r<=t} (x_r - alpha_r) ],
    L(t) = min_{s<=t} [ (x_s - alpha_s) v max_{s<=r<=t} (x_r - beta_r) ],

activated from the first barrier hit: Xi = H after an upper-first hit,
Xi = L after a lower-first hit, Xi = 0 if neither barrier is reached. The
reflected path is y = x - Xi; the increasing parts of -Xi and +Xi are the
cumulative up-push A (active only on {y = alpha}) and down-push C (active
only on {y = beta}).

For a realized value path of the doubly reflected backward recursion the
driver is built in reversed time (terminal value first, pushes removed),
so the decomposition runs on the reversed axis and A, C map back to the
original axis by complementary differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError

__all__ = [
    "BarrierPaths",
    "ReflectedDecomposition",
    "SkorokhodReport",
    "ValuePathDecomposition",
    "compute_h",
    "compute_l",
    "h_profile",
    "l_profile",
    "first_hit_times",
    "reconstruct_reflection",
    "verify_skorokhod",
    "decompose_value_path",
]

GAP_TOLERANCE = 1e-12


@dataclass(frozen=True, eq=False)
class BarrierPaths:
    """Sampled lower/upper barriers along one path."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float)
        b = np.asarray(self.beta, dtype=float)
        if a.ndim != 1 or a.shape != b.shape:
            raise ConfigError("alpha and beta must be 1-d arrays of equal length")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ConfigError("barrier samples must be finite")
        if np.min(b - a) <= GAP_TOLERANCE:
            raise NumericalError("barrier gap violation: min(beta - alpha) <= tolerance")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)

    def __len__(self) -> int:
        return self.alpha.shape[0]


def _check_path(x, barriers: BarrierPaths) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != barriers.alpha.shape:
        raise ConfigError(f"path length {x.shape} does not match barriers {barriers.alpha.shape}")
    return x


def compute_h(x, barriers: BarrierPaths, t_index: int) -> float:
    """Literal evaluation of H at one grid index (reference implementation)."""
    x = _check_path(x, barriers)
    if not 0 <= t_index < len(barriers):
        raise ConfigError(f"t_index {t_index} out of range")
    best = -math.inf
    for s in range(t_index + 1):
        inner = np.min(x[s:t_index + 1] - barriers.alpha[s:t_index + 1])
        best = max(best, min(x[s] - barriers.beta[s], inner))
    return float(best)


def compute_l(x, barriers: BarrierPaths, t_index: int) -> float:
    """Literal evaluation of L at one grid index (reference implementation)."""
    x = _check_path(x, barriers)
    if not 0 <= t_index < len(barriers):
        raise ConfigError(f"t_index {t_index} out of range")
    best = math.inf
    for s in range(t_index + 1):
        inner = np.max(x[s:t_index + 1] - barriers.beta[s:t_index + 1])
        best = min(best, max(x[s] - barriers.alpha[s], inner))
    return float(best)


def h_profile(x, barriers: BarrierPaths) -> np.ndarray:
    """H at every grid index via the running-extremum recursion
    H_t = (x_t - alpha_t) ^ (H_{t-1} v (x_t - beta_t))."""
    x = _check_path(x, barriers)
    out = np.empty_like(x)
    h = -math.inf
    for t in range(x.shape[0]):
        h = min(x[t] - barriers.alpha[t], max(h, x[t] - barriers.beta[t]))
        out[t] = h
    return out


def l_profile(x, barriers: BarrierPaths) -> np.ndarray:
    """L at every grid index via the running-extremum recursion
    L_t = (x_t - beta_t) v (L_{t-1} ^ (x_t - alpha_t))."""
    x = _check_path(x, barriers)
    out = np.empty_like(x)
    low = math.inf
    for t in range(x.shape[0]):
        low = max(x[t] - barriers.beta[t], min(low, x[t] - barriers.alpha[t]))
        out[t] = low
    return out


def first_hit_times(x, barriers: BarrierPaths) -> tuple[float, float]:
    """(T_lower, T_upper): first indices with x <= alpha resp. x >= beta;
    +inf sentinel when a barrier is never reached."""
    x = _check_path(x, barriers)
    lower_mask = barriers.alpha - x >= 0
    upper_mask = x - barriers.beta >= 0
    t_lower = float(np.argmax(lower_mask)) if lower_mask.any() else math.inf
    t_upper = float(np.argmax(upper_mask)) if upper_mask.any() else math.inf
    return t_lower, t_upper


@dataclass(frozen=True, eq=False)
class ReflectedDecomposition:
    """Reflected path and its push decomposition on the evaluation axis.

    Sign convention: xi = c - a (net push subtracted from the driver), so
    y = x - xi = x + a - c with a pushing up at alpha and c pushing down
    at beta; both start at 0 when the driver starts inside the barriers.
    """

    times: np.ndarray
    x: np.ndarray
    y: np.ndarray
    a: np.ndarray
    c: np.ndarray
    xi: np.ndarray
    barriers: BarrierPaths
    simultaneous_hit: bool = False


def reconstruct_reflection(x, barriers: BarrierPaths,
                           times: np.ndarray | None = None) -> ReflectedDecomposition:
    """Recover (y, A, C) from a free driver path via the hit-ordered H/L split.

    On a simultaneous first hit of both barriers (possible on a grid) the
    lower barrier takes precedence and the decomposition is flagged.
    """
    x = _check_path(x, barriers)
    n = x.shape[0]
    if times is None:
        times = np.arange(n, dtype=float)
    else:
        times = np.asarray(times, dtype=float)
        if times.shape != x.shape:
            raise ConfigError("times must match the path length")

    t_lower, t_upper = first_hit_times(x, barriers)
    xi = np.zeros_like(x)
    simultaneous = math.isfinite(t_lower) and t_lower == t_upper
    if t_upper < t_lower:
        prof = h_profile(x, barriers)
        start = int(t_upper)
        xi[start:] = prof[start:]
    elif t_lower < t_upper or simultaneous:
        prof = l_profile(x, barriers)
        start = int(t_lower)
        xi[start:] = prof[start:]

    y = x - xi
    scale = max(1.0, float(np.max(np.abs(x))))
    if np.max(barriers.alpha - y) > 1e-9 * scale or np.max(y - barriers.beta) > 1e-9 * scale:
        raise NumericalError("reconstructed path escaped the barriers beyond rounding")
    y = np.clip(y, barriers.alpha, barriers.beta)
    xi = x - y

    increments = np.diff(xi, prepend=0.0)
    a = np.cumsum(np.maximum(-increments, 0.0))
    c = np.cumsum(np.maximum(increments, 0.0))
    return ReflectedDecomposition(times=times, x=x, y=y, a=a, c=c, xi=xi,
                                  barriers=barriers, simultaneous_hit=simultaneous)


@dataclass(frozen=True)
class SkorokhodReport:
    """Outcome of the decomposition checks; max violations with locations."""

    passed: bool
    max_monotonicity_violation: float
    max_confinement_violation: float
    slackness_lower: float          # sum (y - alpha) dA, scaled by path size
    slackness_upper: float          # sum (beta - y) dC
    max_identity_violation: float   # |x - y - xi|
    start_violation: float          # |a_0| + |c_0|
    worst_index: int

    def summary(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"{status}: monotone {self.max_monotonicity_violation:.3e}, "
                f"confine {self.max_confinement_violation:.3e}, "
                f"slack ({self.slackness_lower:.3e}, {self.slackness_upper:.3e}), "
                f"identity {self.max_identity_violation:.3e}, worst index {self.worst_index}")


def verify_skorokhod(dec: ReflectedDecomposition, tol: float = 1e-8) -> SkorokhodReport:
    """Check monotonicity of A and C, confinement, the bookkeeping identity
    y + xi = x, and discrete complementary slackness, all against ``tol``
    scaled by the path magnitude."""
    scale = max(1.0, float(np.max(np.abs(dec.x))))
    da = np.diff(dec.a, prepend=0.0)
    dc = np.diff(dec.c, prepend=0.0)
    mono = max(float(np.max(-da)), float(np.max(-dc)), 0.0)
    confine = max(float(np.max(dec.barriers.alpha - dec.y)),
                  float(np.max(dec.y - dec.barriers.beta)), 0.0)
    slack_lo = float(np.sum((dec.y - dec.barriers.alpha) * da)) / scale
    slack_hi = float(np.sum((dec.barriers.beta - dec.y) * dc)) / scale
    identity = float(np.max(np.abs(dec.x - dec.y - dec.xi)))
    start = float(abs(dec.a[0]) + abs(dec.c[0]))

    violations = np.maximum.reduce([
        np.maximum(-da, 0.0), np.maximum(-dc, 0.0),
        np.maximum(dec.barriers.alpha - dec.y, 0.0),
        np.maximum(dec.y - dec.barriers.beta, 0.0),
        np.abs(dec.x - dec.y - dec.xi),
    ])
    worst = int(np.argmax(violations))
    passed = (mono <= tol * scale and confine <= tol * scale
              and abs(slack_lo) <= tol and abs(slack_hi) <= tol
              and identity <= tol * scale and start <= tol * scale)
    return SkorokhodReport(passed=passed, max_monotonicity_violation=mono,
                           max_confinement_violation=confine,
                           slackness_lower=slack_lo, slackness_upper=slack_hi,
                           max_identity_violation=identity, start_violation=start,
                           worst_index=worst)


@dataclass(frozen=True, eq=False)
class ValuePathDecomposition:
    """Original-time view of a decomposed value path.

    a and c accumulate forward in original time (a[0] = c[0] = 0) and are
    flat except where the value path sits on the matching barrier; reversed
    holds the underlying reversed-axis decomposition.
    """

    times: np.ndarray
    y: np.ndarray
    a: np.ndarray
    c: np.ndarray
    driver: np.ndarray
    reversed: ReflectedDecomposition


def decompose_value_path(y_tilde: np.ndarray, terminal: float, alpha: np.ndarray,
                         beta: np.ndarray, times: np.ndarray | None = None) -> ValuePathDecomposition:
    """Reconstruct the push processes behind one realized value path.

    y_tilde holds the pre-projection continuation values at nodes 0..N-1,
    terminal the value at node N, and alpha/beta the barrier samples at all
    N+1 nodes in original time. The reversed-time driver starts at the
    terminal value and accumulates only the free (push-removed) increments;
    its reflection therefore reproduces the clamped value path node-wise.
    """
    y_tilde = np.asarray(y_tilde, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    n = y_tilde.shape[0]
    if alpha.shape != (n + 1,) or beta.shape != (n + 1,):
        raise ConfigError("alpha/beta must have one more node than y_tilde")
    if not (alpha[-1] <= terminal <= beta[-1]):
        raise ConfigError("terminal value must lie within the terminal barriers")
    if times is None:
        times = np.arange(n + 1, dtype=float)
    else:
        times = np.asarray(times, dtype=float)

    y_hat = np.empty(n + 1)
    y_hat[:n] = np.clip(y_tilde, alpha[:n], beta[:n])
    y_hat[n] = terminal

    # reversed axis: k = 0 at the terminal node, free increments only
    x_rev = np.empty(n + 1)
    x_rev[0] = terminal
    free = y_tilde[::-1] - y_hat[1:][::-1]   # entry k-1: y_tilde[N-k] - y_hat[N-k+1]
    x_rev[1:] = terminal + np.cumsum(free)
    barriers_rev = BarrierPaths(alpha=alpha[::-1].copy(), beta=beta[::-1].copy())
    dec = reconstruct_reflection(x_rev, barriers_rev, times=times[::-1].copy())

    a_orig = dec.a[-1] - dec.a[::-1]
    c_orig = dec.c[-1] - dec.c[::-1]
    return ValuePathDecomposition(times=times, y=dec.y[::-1].copy(), a=a_orig,
                                  c=c_orig, driver=dec.x[::-1].copy(), reversed=dec)
