"""Small statistical helpers shared by the experiment modules."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import FitFailure


@dataclass(frozen=True)
class ExpFit:
    rate: float
    prefactor: float
    residual: float  # weighted RMS of the log residuals
    n_points: int


def fit_exponential_rate(series, tail=True, min_points=4):
    """Weighted least squares of ``log value = log C - m t``.

    ``series`` holds ``(t, value, stderr)`` triples.  Only points with
    ``value > 3 stderr`` enter; with ``tail`` the fit further uses the last
    half of the grid only.  Raises FitFailure when fewer than
    ``min_points`` points carry signal or when the series does not decay.
    """
    arr = np.asarray(series, dtype=float).reshape(-1, 3)
    if tail:
        arr = arr[len(arr) // 2 :]
    t, v, se = arr.T
    keep = (v > 3 * se) & (v > 0)
    if keep.sum() < min_points:
        raise FitFailure(f"only {int(keep.sum())} points above 3 stderr, need {min_points}")
    t, v, se = t[keep], v[keep], se[keep]
    rel = se / v
    w = np.ones_like(v) if np.all(rel == 0) else 1.0 / np.maximum(rel, 1e-12) ** 2
    y = np.log(v)
    A = np.stack([np.ones_like(t), -t], axis=1)
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(A * sw[:, None], y * sw, rcond=None)
    logc, rate = coef
    resid = y - A @ coef
    rms = float(np.sqrt(np.sum(w * resid**2) / np.sum(w)))
    if not rate > 1e-12 * max(1.0, abs(logc)):
        raise FitFailure(f"series does not decay (fitted rate {rate:.3g})")
    return ExpFit(float(rate), float(math.exp(logc)), rms, int(keep.sum()))


def power_law_exponent(x, y):
    """Least-squares slope of ``log y`` against ``log x``."""
    slope, _ = np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)
    return float(slope)


def total_variation(counts, probs):
    """TV distance between the empirical law of ``counts`` and ``probs``."""
    counts = np.asarray(counts, dtype=float)
    return 0.5 * float(np.abs(counts / counts.sum() - np.asarray(probs)).sum())


def binomial_stderr(k, n):
    phat = k / n
    return math.sqrt(max(phat * (1 - phat), 0.0) / n)
