"""Independent verification machinery.

Two oracles live here, deliberately sharing no formula code with
:mod:`imloss.losses`:

* a central finite-difference gradient that perturbs each logit through
  the same softmax/clip/loss value path, and
* ``reference_loss``, a naive per-pixel scalar transcription of every
  loss formula in plain Python loops.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .losses import LossSpec, validate_spec
from .numerics import one_hot

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4
REL_FLOOR = 1e-8

# Matches the smoothing used by the main path; transcribed, not imported,
# so the two implementations stay independent beyond shared constants.
_SMOOTH = 1e-6


def finite_diff_grad(
    spec: LossSpec,
    logits: np.ndarray,
    truth: np.ndarray,
    h: float = DEFAULT_H,
    dtype=np.longdouble,
) -> np.ndarray:
    """Central differences (L(x + h e) - L(x - h e)) / 2h per logit.

    The loss values run through the same softmax/clip/loss path in
    extended precision (where the platform has one), so subtractive
    roundoff stays far below the comparison tolerance even for strongly
    suppressed gradient entries; the result is returned as float64.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"h must lie in [1e-7, 1e-3], got {h}")
    # validate spec and tensors once, then run the bare value path
    spec = validate_spec(spec)
    losses.loss_value(spec, np.asarray(logits, dtype=np.float64), truth)
    logits = np.array(logits, dtype=dtype)
    y = np.asarray(truth, dtype=np.float64)
    grad = np.zeros_like(logits)
    flat = logits.reshape(-1)
    gflat = grad.reshape(-1)
    step = dtype(h)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = losses._value_unchecked(spec, logits, y)
        flat[i] = orig - step
        lo = losses._value_unchecked(spec, logits, y)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad.astype(np.float64)


def relative_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    """|a - n| / max(1e-8, |a|, |n|), elementwise."""
    denom = np.maximum(REL_FLOOR, np.maximum(np.abs(a), np.abs(n)))
    return np.abs(a - n) / denom


@dataclass
class GradCheckReport:
    family: str
    trials: int
    max_rel_error: float
    failures: list[tuple[int, int, float, float]] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "family": self.family,
                "trials": self.trials,
                "max_rel_error": self.max_rel_error,
                "failures": [
                    {"trial": t, "index": i, "analytic": a, "numeric": n}
                    for t, i, a, n in self.failures
                ],
            },
            indent=2,
        )


def run_gradcheck(
    spec: LossSpec,
    shape: tuple[int, ...] = (1, 4, 4, 2),
    trials: int = 50,
    seed: int = 0,
    h: float = DEFAULT_H,
    tol: float = DEFAULT_TOL,
) -> GradCheckReport:
    """Compare analytic and finite-difference gradients over random draws.

    Logits are drawn uniformly from [-3, 3] to keep probabilities away
    from the clip boundaries where fractional-power gradients degrade.
    Deterministic given ``seed``; failures are sorted by trial then index.
    """
    spec = validate_spec(spec)
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    if len(shape) < 2 or shape[-1] < 2:
        raise ValueError(f"shape needs a trailing class axis of >= 2, got {shape}")
    max_rel = 0.0
    failures: list[tuple[int, int, float, float]] = []
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        logits = rng.uniform(-3.0, 3.0, size=shape)
        labels = rng.integers(0, shape[-1], size=shape[:-1])
        truth = one_hot(labels, shape[-1])
        analytic = losses.gradient(spec, logits, truth)
        numeric = finite_diff_grad(spec, logits, truth, h=h)
        rel = relative_error(analytic, numeric)
        max_rel = max(max_rel, float(rel.max()))
        for idx in np.flatnonzero(rel.reshape(-1) >= tol):
            failures.append(
                (t, int(idx), float(analytic.reshape(-1)[idx]), float(numeric.reshape(-1)[idx]))
            )
    return GradCheckReport(
        family=spec.family, trials=trials, max_rel_error=max_rel, failures=failures
    )


# ---------------------------------------------------------------------------
# scalar reference losses (loop-per-pixel, no vectorized code)
# ---------------------------------------------------------------------------


def _as_rows(p: np.ndarray, y: np.ndarray):
    num_classes = p.shape[-1]
    rows_p = [[float(v) for v in row] for row in np.asarray(p).reshape(-1, num_classes)]
    rows_g = [[float(v) for v in row] for row in np.asarray(y).reshape(-1, num_classes)]
    return rows_p, rows_g, num_classes


def _ref_pt(row_p, row_g) -> float:
    pt = 0.0
    for pc, gc in zip(row_p, row_g):
        pt += pc * gc
    return pt


def _ref_ce(rows_p, rows_g) -> float:
    total = 0.0
    for rp, rg in zip(rows_p, rows_g):
        total += -math.log(_ref_pt(rp, rg))
    return total / len(rows_p)


def _ref_focal(rows_p, rows_g, alpha, gamma) -> float:
    total = 0.0
    for rp, rg in zip(rows_p, rows_g):
        pt = _ref_pt(rp, rg)
        total += alpha * (1.0 - pt) ** gamma * -math.log(pt)
    return total / len(rows_p)


def _ref_counts(rows_p, rows_g, c):
    tp = fp = fn = 0.0
    for rp, rg in zip(rows_p, rows_g):
        tp += rp[c] * rg[c]
        fp += rp[c] * (1.0 - rg[c])
        fn += (1.0 - rp[c]) * rg[c]
    return tp, fp, fn


def _ref_ti(rows_p, rows_g, c, alpha, beta) -> float:
    tp, fp, fn = _ref_counts(rows_p, rows_g, c)
    return (tp + _SMOOTH) / (tp + alpha * fp + beta * fn + _SMOOTH)


def _ref_tversky(rows_p, rows_g, C, alpha, beta, expo) -> float:
    total = 0.0
    for c in range(C):
        total += (1.0 - _ref_ti(rows_p, rows_g, c, alpha, beta)) ** expo
    return total


def _ref_combo(rows_p, rows_g, C, alpha, beta) -> float:
    mce = 0.0
    for rp, rg in zip(rows_p, rows_g):
        w = beta if rg[0] == 0.0 else 1.0 - beta
        mce += w * -math.log(_ref_pt(rp, rg))
    mce /= len(rows_p)
    # pooled soft Dice over classes and pixels
    tp = sp = sg = 0.0
    for rp, rg in zip(rows_p, rows_g):
        for pc, gc in zip(rp, rg):
            tp += pc * gc
            sp += pc
            sg += gc
    dsc = 2.0 * tp / (sp + sg)
    return alpha * mce - (1.0 - alpha) * dsc


def _ref_modified_focal(rows_p, rows_g, delta, gamma, rare) -> float:
    total = 0.0
    for rp, rg in zip(rows_p, rows_g):
        pt = _ref_pt(rp, rg)
        true_class = rg.index(1.0)
        w = delta if true_class in rare else 1.0 - delta
        total += w * (1.0 - pt) ** gamma * -math.log(pt)
    return total / len(rows_p)


def _ref_asym_focal(rows_p, rows_g, delta, gamma, rare) -> float:
    total = 0.0
    for rp, rg in zip(rows_p, rows_g):
        pt = _ref_pt(rp, rg)
        true_class = rg.index(1.0)
        if true_class in rare:
            total += delta * -math.log(pt)
        else:
            total += (1.0 - delta) * (1.0 - pt) ** gamma * -math.log(pt)
    return total / len(rows_p)


def _mti_ab(delta, convention):
    if convention == "fn":
        return 1.0 - delta, delta
    return delta, 1.0 - delta


def _ref_mft(rows_p, rows_g, C, delta, gamma, convention) -> float:
    a, b = _mti_ab(delta, convention)
    total = 0.0
    for c in range(C):
        total += (1.0 - _ref_ti(rows_p, rows_g, c, a, b)) ** (1.0 - gamma)
    return total


def _ref_maft(rows_p, rows_g, C, delta, gamma, rare, convention) -> float:
    a, b = _mti_ab(delta, convention)
    total = 0.0
    for c in range(C):
        term = 1.0 - _ref_ti(rows_p, rows_g, c, a, b)
        total += term ** (1.0 - gamma) if c in rare else term
    return total


def reference_loss(spec: LossSpec, p: np.ndarray, y: np.ndarray) -> float:
    """Scalar-loop transcription of the loss formulas, for small inputs."""
    spec = validate_spec(spec)
    if np.asarray(p).size > 4096 * 8:
        raise ValueError("reference_loss is meant for small inputs")
    rows_p, rows_g, C = _as_rows(p, y)
    rare = spec.rare_classes if spec.rare_classes is not None else tuple(range(1, C))
    fam = spec.family
    if fam == "CE":
        return _ref_ce(rows_p, rows_g)
    if fam == "Focal":
        return _ref_focal(rows_p, rows_g, spec.alpha, spec.gamma)
    if fam == "Dice":
        return _ref_tversky(rows_p, rows_g, C, 0.5, 0.5, 1.0)
    if fam == "Tversky":
        return _ref_tversky(rows_p, rows_g, C, spec.alpha, spec.beta, 1.0)
    if fam == "FocalTversky":
        return _ref_tversky(rows_p, rows_g, C, spec.alpha, spec.beta, 1.0 / spec.gamma)
    if fam == "Combo":
        return _ref_combo(rows_p, rows_g, C, spec.alpha, spec.beta)
    if fam == "HybridFocal":
        f = _ref_focal(rows_p, rows_g, spec.alpha, spec.gamma)
        ft = _ref_tversky(rows_p, rows_g, C, spec.ft_alpha, spec.ft_beta, 1.0 / spec.ft_gamma)
        return spec.lam * f + (1.0 - spec.lam) * ft
    if fam == "UnifiedFocalSym":
        f = _ref_modified_focal(rows_p, rows_g, spec.delta, spec.gamma, rare)
        r = _ref_mft(rows_p, rows_g, C, spec.delta, spec.gamma, spec.delta_convention)
        return spec.lam * f + (1.0 - spec.lam) * r
    if fam == "UnifiedFocalAsym":
        f = _ref_asym_focal(rows_p, rows_g, spec.delta, spec.gamma, rare)
        r = _ref_maft(rows_p, rows_g, C, spec.delta, spec.gamma, rare, spec.delta_convention)
        return spec.lam * f + (1.0 - spec.lam) * r
    raise AssertionError(f"unhandled family {fam}")
