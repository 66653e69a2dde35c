"""Maximum-likelihood OU calibration and residual diagnostics.

Each price series is fitted separately through the Gaussian transition
likelihood of the Euler-linearized OU step

    X_{i+1} | X_i ~ N( X_i + kappa (mu - X_i) dt, sigma^2 dt ).

The closed-form maximizer comes from the regression of X_{i+1} on X_i and
is refined (and cross-checked) with L-BFGS-B on the log-likelihood.
Diagnostics: Kolmogorov-Smirnov test of the standardized residuals against
the standard normal, sample autocorrelations, and normal Q-Q pairs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm

from .errors import ConfigError, NumericalError

__all__ = [
    "PriceSeries",
    "OUFitResult",
    "ou_loglik",
    "fit_mle",
    "residual_diagnostics",
    "kolmogorov_pvalue",
    "ks_statistic",
    "sample_acf",
    "normal_qq_pairs",
    "load_price_csv",
]

MIN_OBSERVATIONS = 30
DEFAULT_DT_YEARS = 1.0 / 52.0


@dataclass(frozen=True, eq=False)
class PriceSeries:
    """One uniformly sampled price series; NaN entries mark gaps.

    Transitions are only formed between consecutive finite observations,
    which splits gapped data into maximal contiguous segments.
    """

    label: str
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or t.shape != v.shape:
            raise ConfigError("times and values must be 1-d arrays of equal length")
        # row count is the observation count; NaN entries are missing values
        if t.shape[0] < MIN_OBSERVATIONS:
            raise ConfigError(f"series {self.label!r} has {t.shape[0]} observations, "
                              f"need >= {MIN_OBSERVATIONS}")
        steps = np.diff(t)
        if steps.size and (np.min(steps) <= 0 or
                           np.max(np.abs(steps - steps[0])) > 1e-9 * max(abs(float(t[-1])), 1.0)):
            raise ConfigError(f"series {self.label!r} is not uniformly spaced")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def transition_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """(X_i, X_{i+1}) over consecutive finite observations."""
        v = self.values
        ok = np.isfinite(v[:-1]) & np.isfinite(v[1:])
        return v[:-1][ok], v[1:][ok]


@dataclass(frozen=True, eq=False)
class OUFitResult:
    label: str
    kappa: float
    mu: float
    sigma: float
    loglik: float
    dt: float
    n_transitions: int
    kappa_se: float
    mu_se: float
    sigma_se: float
    refined_loglik: float
    half_quadratic: bool
    kappa_nonpositive: bool
    degenerate_variance: bool = False
    residuals: np.ndarray | None = None
    ks_statistic: float = float("nan")
    ks_pvalue: float = float("nan")
    acf: np.ndarray | None = None
    qq: np.ndarray | None = None

    def to_dict(self) -> dict:
        out = {
            "label": self.label,
            "kappa": self.kappa,
            "mu": self.mu,
            "sigma": self.sigma,
            "loglik": self.loglik,
            "refined_loglik": self.refined_loglik,
            "dt": self.dt,
            "n_transitions": self.n_transitions,
            "kappa_se": self.kappa_se,
            "mu_se": self.mu_se,
            "sigma_se": self.sigma_se,
            "half_quadratic": self.half_quadratic,
            "kappa_nonpositive": self.kappa_nonpositive,
            "degenerate_variance": self.degenerate_variance,
            "ks_statistic": self.ks_statistic,
            "ks_pvalue": self.ks_pvalue,
        }
        if self.acf is not None:
            out["acf"] = self.acf.tolist()
        return out


def ou_loglik(kappa: float, mu: float, sigma: float, series: PriceSeries,
              half_quadratic: bool = False) -> float:
    """Transition log-likelihood of the series under (kappa, mu, sigma).

    half_quadratic applies an extra factor 1/2 to the squared-residual
    term (a printed-formula variant); it shifts the variance maximizer by
    a factor of two and is off by default.
    """
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    dt = series.dt
    if dt <= 0:
        raise ConfigError("series spacing must be positive")
    x_prev, x_next = series.transition_pairs()
    resid = x_next - (x_prev + kappa * (mu - x_prev) * dt)
    var = sigma * sigma * dt
    quad = resid @ resid / var
    if half_quadratic:
        quad *= 0.5
    n = x_prev.shape[0]
    return float(-0.5 * (n * math.log(2.0 * math.pi * var) + quad))


def _closed_form_fit(series: PriceSeries, half_quadratic: bool):
    x_prev, x_next = series.transition_pairs()
    n = x_prev.shape[0]
    if n < 2:
        raise NumericalError(f"series {series.label!r} has too few transitions")
    dt = series.dt
    sxx = float(np.sum((x_prev - x_prev.mean()) ** 2))
    if sxx <= 1e-12 * max(1.0, float(np.abs(x_prev).max()) ** 2):
        raise NumericalError(f"series {series.label!r} is degenerate (constant regressor)")
    slope = float(np.sum((x_prev - x_prev.mean()) * (x_next - x_next.mean()))) / sxx
    intercept = float(x_next.mean() - slope * x_prev.mean())
    resid = x_next - (slope * x_prev + intercept)
    rss = float(resid @ resid)

    kappa = (1.0 - slope) / dt
    if abs(1.0 - slope) < 1e-12:
        raise NumericalError(f"series {series.label!r} shows no mean reversion (unit-root regression)")
    mu = intercept / (1.0 - slope)
    sigma_sq = rss / (n * dt)
    if half_quadratic:
        sigma_sq *= 0.5
    scale = max(1.0, float(np.abs(x_prev).max()))
    degenerate = sigma_sq <= (1e-10 * scale) ** 2 / dt
    sigma = math.sqrt(max(sigma_sq, 0.0))

    # regression asymptotics mapped through the reparameterization
    s2 = rss / max(n - 2, 1)
    var_slope = s2 / sxx
    var_intercept = s2 * (1.0 / n + x_prev.mean() ** 2 / sxx)
    cov_si = -s2 * x_prev.mean() / sxx
    kappa_se = math.sqrt(var_slope) / dt
    dmu_db = 1.0 / (1.0 - slope)
    dmu_da = intercept / (1.0 - slope) ** 2
    mu_var = (dmu_db ** 2 * var_intercept + dmu_da ** 2 * var_slope
              + 2.0 * dmu_da * dmu_db * cov_si)
    mu_se = math.sqrt(max(mu_var, 0.0))
    sigma_se = sigma / math.sqrt(2.0 * n)
    return kappa, mu, sigma, kappa_se, mu_se, sigma_se, n, degenerate


def fit_mle(series: PriceSeries, half_quadratic: bool = False, refine: bool = True) -> OUFitResult:
    """Fit (kappa, mu, sigma) by maximum likelihood.

    The regression closed form is the primary maximizer; a quasi-Newton
    pass over the likelihood must agree with it (the refined value is kept
    when it is better, and a material disagreement indicates a formula
    transcription bug that the test suite checks for). A noiseless series
    (vanishing residual variance) is returned with the degenerate_variance
    flag set rather than rejected.
    """
    kappa, mu, sigma, kappa_se, mu_se, sigma_se, n, degenerate = \
        _closed_form_fit(series, half_quadratic)
    if degenerate:
        return OUFitResult(label=series.label, kappa=kappa, mu=mu, sigma=sigma,
                           loglik=float("nan"), dt=series.dt, n_transitions=n,
                           kappa_se=kappa_se, mu_se=mu_se, sigma_se=sigma_se,
                           refined_loglik=float("nan"), half_quadratic=half_quadratic,
                           kappa_nonpositive=kappa <= 0, degenerate_variance=True)
    ll_closed = ou_loglik(kappa, mu, sigma, series, half_quadratic)

    ll_refined = ll_closed
    if refine:
        def negative(params):
            k, m, s = params
            if s <= 0:
                return 1e18
            return -ou_loglik(k, m, s, series, half_quadratic)

        res = minimize(negative, x0=np.array([kappa, mu, sigma]), method="L-BFGS-B",
                       bounds=[(None, None), (None, None), (1e-12, None)])
        if res.success and -res.fun > ll_closed:
            ll_refined = float(-res.fun)
            kappa, mu, sigma = (float(v) for v in res.x)

    return OUFitResult(label=series.label, kappa=kappa, mu=mu, sigma=sigma,
                       loglik=max(ll_closed, ll_refined), dt=series.dt, n_transitions=n,
                       kappa_se=kappa_se, mu_se=mu_se, sigma_se=sigma_se,
                       refined_loglik=ll_refined, half_quadratic=half_quadratic,
                       kappa_nonpositive=kappa <= 0)


def kolmogorov_pvalue(lam: float) -> float:
    """Asymptotic Kolmogorov survival 2 sum_k (-1)^{k-1} exp(-2 k^2 lam^2),
    truncated at relative 1e-10."""
    if lam <= 0.05:
        return 1.0
    total = 0.0
    for k in range(1, 201):
        term = (-1.0) ** (k - 1) * math.exp(-2.0 * k * k * lam * lam)
        total += term
        if abs(term) < 1e-10 * max(abs(total), 1e-300):
            break
    return float(min(max(2.0 * total, 0.0), 1.0))


def ks_statistic(sample: np.ndarray, cdf=norm.cdf) -> float:
    """One-sample Kolmogorov-Smirnov statistic D_n against a given CDF."""
    x = np.sort(np.asarray(sample, dtype=float))
    n = x.shape[0]
    if n < 1:
        raise ConfigError("empty sample")
    cdf_vals = cdf(x)
    d_plus = float(np.max(np.arange(1, n + 1) / n - cdf_vals))
    d_minus = float(np.max(cdf_vals - np.arange(0, n) / n))
    return max(d_plus, d_minus)


def sample_acf(x: np.ndarray, n_lags: int = 20) -> np.ndarray:
    """Sample autocorrelations r_0..r_{n_lags} (r_0 = 1)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if n <= n_lags:
        raise ConfigError(f"need more than {n_lags} points for {n_lags} lags")
    centered = x - x.mean()
    denom = float(centered @ centered)
    if denom == 0.0:
        raise NumericalError("zero-variance sample in acf")
    out = np.empty(n_lags + 1)
    out[0] = 1.0
    for k in range(1, n_lags + 1):
        out[k] = float(centered[:-k] @ centered[k:]) / denom
    return out


def normal_qq_pairs(sample: np.ndarray) -> np.ndarray:
    """(theoretical, empirical) quantile pairs with Blom plotting positions."""
    x = np.sort(np.asarray(sample, dtype=float))
    n = x.shape[0]
    positions = (np.arange(1, n + 1) - 0.375) / (n + 0.25)
    return np.column_stack([norm.ppf(positions), x])


def residual_diagnostics(fit: OUFitResult, series: PriceSeries, n_lags: int = 20) -> OUFitResult:
    """Standardize the one-step residuals and attach K-S, ACF, and Q-Q."""
    x_prev, x_next = series.transition_pairs()
    dt = series.dt
    resid = (x_next - x_prev - fit.kappa * (fit.mu - x_prev) * dt) / (fit.sigma * math.sqrt(dt))
    if resid.shape[0] < 8:
        raise ConfigError("insufficient data: need at least 8 residuals for diagnostics")
    d_n = ks_statistic(resid)
    p = kolmogorov_pvalue(math.sqrt(resid.shape[0]) * d_n)
    lags = min(n_lags, resid.shape[0] - 1)
    return replace(fit, residuals=resid, ks_statistic=d_n, ks_pvalue=p,
                   acf=sample_acf(resid, lags), qq=normal_qq_pairs(resid))


def load_price_csv(path, dt_years: float = DEFAULT_DT_YEARS) -> list[PriceSeries]:
    """Read `date,<label>,...` CSV with ISO dates into one series per column.

    Consecutive rows are mapped to a uniform grid with spacing dt_years;
    empty cells become NaN gaps (handled as segment boundaries downstream).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: empty CSV")
        if not header or header[0].strip().lower() != "date":
            raise ConfigError(f"{path}: first header column must be 'date', got {header[:1]!r}")
        labels = [h.strip() for h in header[1:]]
        if not labels:
            raise ConfigError(f"{path}: no price columns after 'date'")
        rows = []
        for i, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ConfigError(f"{path}: row {i} has {len(row)} cells, expected {len(header)}")
            date = row[0].strip()
            if len(date) < 10 or date[4] != "-" or date[7] != "-":
                raise ConfigError(f"{path}: row {i} has a non-ISO date {date!r}")
            vals = []
            for j, cell in enumerate(row[1:], start=2):
                cell = cell.strip()
                if not cell:
                    vals.append(float("nan"))
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ConfigError(f"{path}: row {i}, column {j} is not numeric: {cell!r}")
            rows.append(vals)
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=float)
    times = np.arange(data.shape[0], dtype=float) * dt_years
    return [PriceSeries(label=lab, times=times, values=data[:, j])
            for j, lab in enumerate(labels)]
