"""Ensemble statistics: means with batch-means intervals, KS distances, slope fits."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as _st

from .core import ParameterError

Z95 = 1.959963984540054


@dataclass(frozen=True)
class EnsembleEstimate:
    mean: float
    se: float
    ci_low: float
    ci_high: float
    batch_ci_low: float
    batch_ci_high: float
    n: int

    def z_score(self, target: float) -> float:
        """Standardized distance of ``target`` from the mean (inf if se == 0 and they differ)."""
        diff = self.mean - target
        if self.se == 0.0:
            return 0.0 if diff == 0.0 else math.inf
        return abs(diff) / self.se

    def as_dict(self):
        return {
            "mean": self.mean, "se": self.se, "ci_low": self.ci_low, "ci_high": self.ci_high,
            "batch_ci_low": self.batch_ci_low, "batch_ci_high": self.batch_ci_high, "n": self.n,
        }


def estimate_ensemble(values, n_batches: int = 20, level: float = 0.95) -> EnsembleEstimate:
    """Mean, plain standard error and batch-means confidence interval.

    The batch interval splits the replicas (in index order) into ``n_batches``
    contiguous groups and uses a Student-t interval on the group means. For
    i.i.d. light-tailed input it is slightly wider than the plain interval;
    for heavy-tailed weights it is the more honest of the two.
    """
    x = np.asarray(values, dtype=float).ravel()
    n = x.size
    if n < 2:
        raise ParameterError("estimate_ensemble needs at least 2 replicas")
    mean = float(x.mean())
    se = float(x.std(ddof=1) / math.sqrt(n))
    zq = _st.norm.ppf(0.5 + level / 2.0)
    b = max(2, min(int(n_batches), n))
    groups = np.array_split(x, b)
    gm = np.array([g.mean() for g in groups])
    tq = _st.t.ppf(0.5 + level / 2.0, b - 1)
    bse = float(gm.std(ddof=1) / math.sqrt(b))
    return EnsembleEstimate(mean, se, mean - zq * se, mean + zq * se,
                            mean - tq * bse, mean + tq * bse, n)


def combined_z(a: EnsembleEstimate, b: EnsembleEstimate) -> float:
    """|a - b| in units of the combined standard error."""
    s = math.hypot(a.se, b.se)
    d = abs(a.mean - b.mean)
    if s == 0.0:
        return 0.0 if d == 0.0 else math.inf
    return d / s


def heavy_tail_share(weights, top: float = 0.01) -> float:
    """Fraction of the total carried by the largest ``top`` fraction of weights."""
    w = np.sort(np.abs(np.asarray(weights, dtype=float).ravel()))
    total = w.sum()
    if total == 0.0:
        return 0.0
    k = max(1, int(math.ceil(top * w.size)))
    return float(w[-k:].sum() / total)


def ks_statistic(samples, cdf, n_total: int | None = None) -> float:
    """Kolmogorov-Smirnov distance between the empirical CDF and ``cdf``.

    ``cdf`` is evaluated at the sorted sample points; both one-sided gaps are
    included. With ``n_total`` larger than ``len(samples)`` the empirical
    function is the sub-distribution ``#{x_i <= r} / n_total``, which is how a
    per-axis exit law (total mass below 1) is compared.
    """
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    if n_total is None:
        n_total = x.size
    if n_total < 1:
        raise ParameterError("ks_statistic needs at least one sample")
    if x.size == 0:
        return float(cdf(np.inf)) if callable(cdf) else 0.0
    f = np.asarray(cdf(x), dtype=float)
    i = np.arange(1, x.size + 1)
    d_plus = np.max(i / n_total - f)
    d_minus = np.max(f - (i - 1) / n_total)
    d = max(d_plus, d_minus)
    # tail gap beyond the last sample for sub-distributions
    tail = float(np.asarray(cdf(np.array([np.inf])), dtype=float)[0]) - x.size / n_total
    return float(max(d, abs(tail)))


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    se: float
    ci_low: float
    ci_high: float
    r2: float
    n_points: int

    def contains(self, value: float) -> bool:
        return self.ci_low <= value <= self.ci_high

    def as_dict(self):
        return {"slope": self.slope, "intercept": self.intercept, "se": self.se,
                "ci_low": self.ci_low, "ci_high": self.ci_high, "r2": self.r2,
                "n_points": self.n_points}


def ols_fit(x, y, level: float = 0.95) -> SlopeFit:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    if n < 3 or np.ptp(x) == 0.0:
        raise ParameterError("degenerate regression window")
    xm, ym = x.mean(), y.mean()
    sxx = float(((x - xm) ** 2).sum())
    slope = float(((x - xm) * (y - ym)).sum() / sxx)
    intercept = float(ym - slope * xm)
    resid = y - (intercept + slope * x)
    sse = float((resid ** 2).sum())
    sst = float(((y - ym) ** 2).sum())
    se = math.sqrt(sse / (n - 2) / sxx)
    tq = _st.t.ppf(0.5 + level / 2.0, n - 2)
    r2 = 1.0 - sse / sst if sst > 0 else 1.0
    return SlopeFit(slope, intercept, se, slope - tq * se, slope + tq * se, r2, n)


def lyapunov_fit(t, log_m, window: float = 0.5, level: float = 0.95) -> SlopeFit:
    """Least-squares slope of ``log_m`` against ``t`` on the trailing window.

    ``window`` is the fraction of the grid (by index, from the end) used.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(log_m, dtype=float)
    if t.shape != y.shape:
        raise ParameterError("t and log_m must have the same length")
    if not 0.0 < window <= 1.0:
        raise ParameterError("window must be a fraction in (0, 1]")
    k = int(math.ceil(window * t.size))
    if k < 4:
        raise ParameterError(f"need at least 4 points in the fit window, got {k}")
    return ols_fit(t[-k:], y[-k:], level)
