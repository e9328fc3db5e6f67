"""Estimates with standard errors: plain, self-normalized, ratio and fitted."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Estimate:
    """A statistical output with its standard error and provenance."""

    value: float | np.ndarray
    stderr: float | np.ndarray
    n_replicas: int
    estimator_id: str
    config_hash: str = ""
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.value = _scalar_or_array(self.value)
        self.stderr = _scalar_or_array(self.stderr)
        if np.any(np.asarray(self.stderr) < 0):
            raise ValueError("negative standard error")

    def z_against(self, target, other_stderr=0.0):
        se = np.sqrt(np.asarray(self.stderr) ** 2 + np.asarray(other_stderr) ** 2)
        diff = np.asarray(self.value) - np.asarray(target)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.where(diff == 0, 0.0, np.inf))
        return float(z) if z.ndim == 0 else z

    def within(self, target, k=4.0, other_stderr=0.0) -> bool:
        return bool(np.all(np.abs(self.z_against(target, other_stderr)) <= k))


def _scalar_or_array(v):
    a = np.asarray(v, dtype=float)
    return float(a) if a.ndim == 0 else a


def mean_estimate(x, weights=None, estimator_id="mean", axis=0) -> Estimate:
    """Mean over replicas (axis 0), self-normalized when ``weights`` is given."""
    x = np.asarray(x, dtype=float)
    n = x.shape[axis]
    if n < 2:
        raise ValueError("need at least two replicas")
    if weights is None:
        m = x.mean(axis=axis)
        se = x.std(axis=axis, ddof=1) / np.sqrt(n)
    else:
        w = np.asarray(weights, dtype=float)
        W = w.sum()
        shape = [1] * x.ndim
        shape[axis] = n
        wb = w.reshape(shape)
        m = (wb * x).sum(axis=axis) / W
        r = wb * (x - np.expand_dims(m, axis))
        se = np.sqrt((r**2).sum(axis=axis) * n / (n - 1)) / W
    return Estimate(m, se, n, estimator_id)


def ess_fraction(weights) -> float:
    """Kish effective sample size over the sample size."""
    w = np.asarray(weights, dtype=float)
    return float(w.sum() ** 2 / (w.size * np.sum(w**2)))


def ratio_estimate(A, B, groups=None, estimator_id="ratio") -> Estimate:
    """``sum A / sum B`` with a delta-method standard error.

    Terms sharing a ``groups`` label form one sequence in which neighbouring
    terms may be correlated (1-dependent); the lag-1 cross products of the
    residuals ``A - R B`` inside each sequence enter the variance.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.size < 2 or B.sum() == 0:
        raise ValueError("ratio needs at least two terms and nonzero denominator")
    R = A.sum() / B.sum()
    r = A - R * B
    var = np.sum(r**2)
    if groups is not None:
        g = np.asarray(groups)
        same = g[1:] == g[:-1]
        lag = 2.0 * np.sum((r[1:] * r[:-1])[same])
        if var + lag > 0:
            var += lag
    n = A.size
    se = np.sqrt(var * n / (n - 1)) / abs(B.sum())
    return Estimate(R, se, n, estimator_id)


def covariance_estimate(x, y, weights=None, estimator_id="cov") -> Estimate:
    """``E[x y] - E[x] E[y]`` over replicas, self-normalized when weighted."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    W = w.sum()
    mx = np.dot(w, x) / W
    my = np.dot(w, y) / W
    c = np.dot(w, (x - mx) * (y - my)) / W
    # influence of each replica on the self-normalized covariance
    psi = w * ((x - mx) * (y - my) - c) / W
    se = np.sqrt(np.sum(psi**2) * n / (n - 1))
    return Estimate(c, se, n, estimator_id)


def fit_through_origin(x, y, stderr) -> tuple[float, float]:
    """Weighted least-squares slope of ``y = b x`` and its standard error."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = 1.0 / np.asarray(stderr, dtype=float) ** 2
    sxx = np.sum(w * x * x)
    return float(np.sum(w * x * y) / sxx), float(1.0 / np.sqrt(sxx))


def fit_line(x, y, stderr) -> tuple[np.ndarray, np.ndarray]:
    """Weighted least squares ``y = a + b x``; returns ``(a, b)`` and standard errors."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = 1.0 / np.asarray(stderr, dtype=float) ** 2
    X = np.column_stack([np.ones_like(x), x])
    F = X.T @ (w[:, None] * X)
    cov = np.linalg.inv(F)
    beta = cov @ (X.T @ (w * y))
    return beta, np.sqrt(np.diag(cov))


def combined_z(a: Estimate, b: Estimate) -> float:
    return float(a.z_against(b.value, b.stderr))


def lag_products_stderr(x, groups) -> tuple[float, float]:
    """Pooled lag-2 autocorrelation inside groups and its iid-null standard error."""
    x = np.asarray(x, dtype=float)
    g = np.asarray(groups)
    y = x - x.mean()
    same = g[2:] == g[:-2]
    prod = (y[2:] * y[:-2])[same]
    den = np.mean(y**2)
    rho = prod.mean() / den
    se = prod.std(ddof=1) / np.sqrt(prod.size) / den
    return float(rho), float(se)
