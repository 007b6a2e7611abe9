"""Evaluation metrics: MAE, Spearman ranking correlation, paired t-test."""

from __future__ import annotations

import math

import numpy as np
from scipy import stats as sps

from .errors import DataError


def mae(predicted, actual) -> float:
    predicted = np.asarray(predicted, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if predicted.shape != actual.shape or predicted.ndim != 1:
        raise DataError(f"mae expects equal-length vectors, got {predicted.shape} vs {actual.shape}")
    if predicted.size == 0:
        raise DataError("mae of empty vectors is undefined")
    return float(np.abs(predicted - actual).mean())


def average_ranks(x) -> np.ndarray:
    """1-based ranks; ties share the mean of their rank range."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def src(predicted, actual) -> float:
    """Spearman ranking correlation: standardized cross-moment of the
    average-ranked data with sample standard deviations and k-1 divisor."""
    predicted = np.asarray(predicted, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if predicted.shape != actual.shape or predicted.ndim != 1:
        raise DataError(f"src expects equal-length vectors, got {predicted.shape} vs {actual.shape}")
    k = predicted.size
    if k < 2:
        raise DataError(f"src needs at least 2 samples, got {k}")
    rp = average_ranks(predicted)
    ra = average_ranks(actual)
    sp = rp.std(ddof=1)
    sa = ra.std(ddof=1)
    if sp == 0.0 or sa == 0.0:
        raise DataError("src undefined for a constant input vector")
    return float(((rp - rp.mean()) / sp * (ra - ra.mean()) / sa).sum() / (k - 1))


def paired_t_test(errors_a, errors_b) -> tuple[float, float]:
    """Paired two-sided Student t on per-sample errors. Zero-variance
    differences report (inf, 0.0) when the means differ and (0.0, 1.0)
    when identical."""
    a = np.asarray(errors_a, dtype=float)
    b = np.asarray(errors_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise DataError("paired_t_test expects equal-length vectors of length >= 2")
    diff = a - b
    k = diff.size
    sd = diff.std(ddof=1)
    if sd == 0.0:
        if diff.mean() == 0.0:
            return 0.0, 1.0
        return math.inf, 0.0
    t = diff.mean() / (sd / math.sqrt(k))
    p = 2.0 * sps.t.sf(abs(t), df=k - 1)
    return float(t), float(p)
