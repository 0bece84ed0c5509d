"""Hard-label segmentation metrics and the rank-sum significance test."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .numerics import one_hot, validate_one_hot


class MetricsError(ValueError):
    pass


@dataclass
class ConfusionCounts:
    """Per-class integer tp/fp/fn/tn; each class row sums to the element count."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray


@dataclass
class SegMetrics:
    dsc: np.ndarray
    iou: np.ndarray
    precision: np.ndarray
    recall: np.ndarray


def argmax_mask(probs: np.ndarray) -> np.ndarray:
    """Hard one-hot prediction from a probability (or logit) tensor."""
    labels = np.argmax(probs, axis=-1)
    return one_hot(labels, probs.shape[-1])


def confusion(pred: np.ndarray, truth: np.ndarray) -> ConfusionCounts:
    pred = validate_one_hot(pred)
    truth = validate_one_hot(truth)
    if pred.shape != truth.shape:
        raise MetricsError(f"pred shape {pred.shape} != truth shape {truth.shape}")
    axes = tuple(range(pred.ndim - 1))
    n = int(np.prod(pred.shape[:-1]))
    tp = (pred * truth).sum(axis=axes).astype(np.int64)
    fp = (pred * (1.0 - truth)).sum(axis=axes).astype(np.int64)
    fn = ((1.0 - pred) * truth).sum(axis=axes).astype(np.int64)
    tn = n - tp - fp - fn
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # degenerate 0/0 scores a perfect 1 (empty class predicted empty)
    out = np.ones(num.shape, dtype=np.float64)
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


def compute_metrics(counts: ConfusionCounts) -> SegMetrics:
    tp = counts.tp.astype(np.float64)
    fp = counts.fp.astype(np.float64)
    fn = counts.fn.astype(np.float64)
    return SegMetrics(
        dsc=_ratio(2.0 * tp, 2.0 * tp + fp + fn),
        iou=_ratio(tp, tp + fp + fn),
        precision=_ratio(tp, tp + fp),
        recall=_ratio(tp, tp + fn),
    )


# ---------------------------------------------------------------------------
# Wilcoxon rank-sum test
# ---------------------------------------------------------------------------


def _ranks(pooled: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with ties sharing their mean rank."""
    order = np.argsort(pooled, kind="stable")
    ranks = np.empty(len(pooled), dtype=np.float64)
    i = 0
    while i < len(pooled):
        j = i
        while j + 1 < len(pooled) and pooled[order[j + 1]] == pooled[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_p(ranks: np.ndarray, n: int, w: float) -> float:
    """Exact two-sided p by enumerating all size-n subsets via subset-sum DP.

    Average ranks are multiples of 1/2, so doubling makes them integers.
    """
    scaled = np.rint(2.0 * ranks).astype(np.int64)
    total = int(scaled.sum())
    # counts[k][s] = number of size-k subsets with scaled rank-sum s
    counts = [np.zeros(total + 1, dtype=np.float64) for _ in range(n + 1)]
    counts[0][0] = 1.0
    for r in scaled:
        for k in range(min(n, len(scaled)), 0, -1):
            counts[k][r:] += counts[k - 1][: total + 1 - r]
    dist = counts[n]
    n_subsets = dist.sum()
    w2 = int(round(2.0 * w))
    tail_lo = dist[: w2 + 1].sum()
    tail_hi = dist[w2:].sum()
    return min(1.0, 2.0 * min(tail_lo, tail_hi) / n_subsets)


def _normal_p(ranks: np.ndarray, n: int, w: float) -> float:
    """Normal approximation with tie correction and continuity correction."""
    big_n = len(ranks)
    m = big_n - n
    mu = n * (big_n + 1) / 2.0
    # tie correction over groups of equal ranks
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float(((tie_counts**3 - tie_counts).sum())) / (big_n * (big_n - 1))
    var = n * m / 12.0 * ((big_n + 1) - tie_term)
    if var <= 0:
        return 1.0
    diff = w - mu
    cc = 0.5 * np.sign(diff)
    z = (diff - cc) / math.sqrt(var)
    return min(1.0, 2.0 * 0.5 * math.erfc(abs(z) / math.sqrt(2.0)))


def wilcoxon_rank_sum(a, b, method: str = "auto") -> float:
    """Two-sided rank-sum p-value.

    Exact by enumeration for pooled sizes up to 20, normal approximation
    with tie correction above.  Two-sided by doubling the smaller
    one-sided tail, capped at 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise MetricsError("both samples must be nonempty")
    pooled = np.concatenate([a, b])
    if np.unique(pooled).size == 1:
        return 1.0
    ranks = _ranks(pooled)
    w = float(ranks[: a.size].sum())
    if method == "auto":
        method = "exact" if pooled.size <= 20 else "normal"
    if method == "exact":
        return _exact_p(ranks, a.size, w)
    if method == "normal":
        return _normal_p(ranks, a.size, w)
    raise MetricsError(f"method must be 'auto', 'exact' or 'normal', got {method!r}")


def mean_ci(values) -> tuple[float, float]:
    """Sample mean and 1.96 * standard error (95% normal CI half-width)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise MetricsError(f"need at least 2 values for a CI, got {values.size}")
    mean = float(values.mean())
    half = 1.96 * float(values.std(ddof=1)) / math.sqrt(values.size)
    return mean, half


METRIC_ROW_HEADER = ("dataset", "loss", "seed", "class", "dsc", "iou", "precision", "recall")


def write_metric_rows(path: str | os.PathLike, rows) -> None:
    """Emit metric rows as CSV with the canonical header."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRIC_ROW_HEADER)
        for row in rows:
            writer.writerow(row)
