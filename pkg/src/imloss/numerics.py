"""Dense tensor primitives shared by every module.

Tensors are plain numpy arrays in channels-last, row-major layout: shape
(batch, *spatial, channels).  Binary problems always use two explicit
channels with background as class 0, so binary and multiclass share one
code path.  Oracle and gradient-check paths run in float64; the trainer
is allowed to run in float32.
"""

from __future__ import annotations

import numpy as np

# Probability clip applied before any logarithm.
EPS_CLIP = 1e-7


class NumericsError(ValueError):
    """Raised when a tensor violates a numerics-module contract."""


def _idx(where: np.ndarray) -> tuple[int, ...]:
    return tuple(int(i) for i in where)


def require_finite(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise NumericsError(f"{name} contains non-finite value at index {_idx(bad)}")
    return x


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the trailing (class) axis."""
    logits = require_finite(np.asarray(logits), "logits")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Append a one-hot class axis to an integer label tensor."""
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise NumericsError(f"labels must be integers, got dtype {labels.dtype}")
    if num_classes < 1:
        raise NumericsError(f"num_classes must be positive, got {num_classes}")
    bad = (labels < 0) | (labels >= num_classes)
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        raise NumericsError(
            f"label {int(labels[tuple(idx)])} at index {_idx(idx)} "
            f"outside [0, {num_classes})"
        )
    out = np.zeros(labels.shape + (num_classes,), dtype=np.float64)
    np.put_along_axis(out, labels[..., None].astype(np.int64), 1.0, axis=-1)
    return out


def clip_probs(p: np.ndarray, eps: float = EPS_CLIP) -> np.ndarray:
    """Clip probabilities into [eps, 1-eps] so logs stay finite."""
    if not 0.0 < eps < 0.5:
        raise NumericsError(f"eps must lie in (0, 0.5), got {eps}")
    return np.clip(np.asarray(p), eps, 1.0 - eps)


def validate_probs(p: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Check ProbTensor invariants: values in [0,1], class sums equal 1."""
    p = require_finite(p, "probabilities")
    if p.ndim < 1:
        raise NumericsError("probability tensor needs a class axis")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise NumericsError("probabilities outside [0, 1]")
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > tol):
        worst = float(np.abs(sums - 1.0).max())
        raise NumericsError(f"class sums deviate from 1 by {worst:.3g} (> {tol:.3g})")
    return p


def validate_one_hot(y: np.ndarray) -> np.ndarray:
    """Check OneHotMask invariants: values in {0,1}, exactly one 1 per element."""
    y = np.asarray(y)
    if y.ndim < 1:
        raise NumericsError("one-hot tensor needs a class axis")
    if not np.logical_or(y == 0, y == 1).all():
        bad = np.argwhere(np.logical_and(y != 0, y != 1))[0]
        raise NumericsError(
            f"one-hot mask has value {float(y[tuple(bad)])!r} at index {_idx(bad)}"
        )
    sums = y.sum(axis=-1)
    if np.any(sums != 1):
        idx = np.argwhere(sums != 1)[0]
        raise NumericsError(
            f"element {_idx(idx)} has class-sum {float(sums[tuple(idx)])} != 1"
        )
    return y.astype(np.float64, copy=False)
