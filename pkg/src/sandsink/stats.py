"""Small estimators shared by the Monte Carlo modules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LogLinearFit:
    slope: float
    intercept: float
    slope_stderr: float
    n_points: int

    @property
    def significant(self):
        """Slope is negative and more than three standard errors from zero."""
        return self.slope < 0 and abs(self.slope) > 3 * self.slope_stderr

    def as_dict(self):
        return {"slope": self.slope, "intercept": self.intercept, "slope_stderr": self.slope_stderr,
                "n_points": self.n_points, "significant": self.significant}


def loglinear_fit(x, y):
    """Unweighted least squares of ``log y`` on ``x`` over the points with ``y > 0``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = y > 0
    x, ly = x[keep], np.log(y[keep])
    m = len(x)
    if m < 3:
        raise ValueError(f"need at least 3 positive points for a log-linear fit, got {m}")
    xm = x.mean()
    sxx = ((x - xm) ** 2).sum()
    slope = ((x - xm) * (ly - ly.mean())).sum() / sxx
    intercept = ly.mean() - slope * xm
    resid = ly - intercept - slope * x
    s2 = (resid ** 2).sum() / (m - 2)
    return LogLinearFit(float(slope), float(intercept), float(np.sqrt(s2 / sxx)), m)


def batch_means(values, n_batches=30):
    """Mean and batch-means standard error along axis 0.

    Consecutive rows are grouped into ``n_batches`` equal batches (trailing
    remainder dropped from the error estimate only).
    """
    values = np.asarray(values, dtype=float)
    n = len(values)
    mean = values.mean(axis=0)
    n_batches = min(n_batches, n)
    size = n // n_batches
    if n_batches < 2:
        return mean, np.full_like(mean, np.nan)
    b = values[: size * n_batches].reshape((n_batches, size) + values.shape[1:]).mean(axis=1)
    se = b.std(axis=0, ddof=1) / np.sqrt(n_batches)
    return mean, se


def binomial_se(p_hat, n):
    p_hat = np.asarray(p_hat, dtype=float)
    return np.sqrt(np.clip(p_hat * (1 - p_hat), 0, None) / n)
