"""The segmentation loss hierarchy: forward values and analytic gradients.

Every loss is driven by a single declarative :class:`LossSpec` and is
evaluated on logits; probabilities are produced by a stable softmax over
the trailing class axis and clipped to ``[EPS_CLIP, 1 - EPS_CLIP]`` before
any logarithm.  Gradients are taken with respect to the logits, through
softmax, so the simplex constraint is respected during checking and
training.

Conventions that the formulas below commit to (all flagged in README):

* Pixel losses average over elements; region losses sum over classes,
  including the background channel.
* Tversky ratios weight false positives by ``alpha`` and false negatives
  by ``beta``; the unified variants replace these with ``1 - delta`` and
  ``delta`` (``delta`` on false negatives, so ``delta > 0.5`` favours
  recall).  Set ``delta_convention="fp"`` to flip the weighting.
* Every soft ratio gets ``EPS_SMOOTH`` added to numerator and
  denominator, so a class absent from both prediction and truth scores a
  perfect 1.
* The unified focal components use exponent ``gamma`` on the focal
  modulating factor and ``1 - gamma`` on the region term, so at
  ``gamma = 0`` they reduce to the class-weighted cross entropy and the
  plain Dice/Tversky sum.  With ``delta = 0.5`` the cross-entropy
  component equals ``0.5 * CE`` (both class weights are 0.5): the
  recovered loss matches cross entropy up to that constant factor, which
  leaves minimisers and gradient directions unchanged.
* The asymmetric focal variant applies no focal exponent to rare-class
  terms; the asymmetric region variant keeps the focal exponent only on
  rare-class terms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .numerics import (
    EPS_CLIP,
    clip_probs,
    require_finite,
    softmax,
    validate_one_hot,
)

EPS_SMOOTH = 1e-6

# Floor for bases of fractional powers inside derivatives, so perfect
# predictions never produce NaN/inf gradients.
_POW_FLOOR = 1e-12

FAMILIES = (
    "CE",
    "Focal",
    "Dice",
    "Tversky",
    "FocalTversky",
    "Combo",
    "HybridFocal",
    "UnifiedFocalSym",
    "UnifiedFocalAsym",
)


class LossSpecError(ValueError):
    """Raised when a LossSpec (or its JSON form) is invalid."""


@dataclass(frozen=True)
class LossSpec:
    """Tagged choice of loss family plus its hyperparameters.

    Unset fields take the family defaults listed in ``FAMILY_FIELDS``.
    ``lam`` is serialized as ``"lambda"``.  ``ft_*`` fields carry the
    region-component hyperparameters of ``HybridFocal`` (six in total).
    """

    family: str
    alpha: float | None = None
    beta: float | None = None
    gamma: float | None = None
    delta: float | None = None
    lam: float | None = None
    rare_classes: tuple[int, ...] | None = None
    ft_alpha: float | None = None
    ft_beta: float | None = None
    ft_gamma: float | None = None
    delta_convention: str | None = None


# field name -> (JSON key, default per family)
FAMILY_FIELDS: dict[str, dict[str, float | str | None]] = {
    "CE": {},
    "Focal": {"alpha": 0.25, "gamma": 2.0},
    "Dice": {},
    "Tversky": {"alpha": 0.3, "beta": 0.7},
    "FocalTversky": {"alpha": 0.3, "beta": 0.7, "gamma": 4.0 / 3.0},
    "Combo": {"alpha": 0.5, "beta": 0.5},
    "HybridFocal": {
        "lam": 0.5,
        "alpha": 0.25,
        "gamma": 2.0,
        "ft_alpha": 0.3,
        "ft_beta": 0.7,
        "ft_gamma": 4.0 / 3.0,
    },
    "UnifiedFocalSym": {
        "lam": 0.5,
        "delta": 0.6,
        "gamma": 0.5,
        "rare_classes": None,
        "delta_convention": "fn",
    },
    "UnifiedFocalAsym": {
        "lam": 0.5,
        "delta": 0.6,
        "gamma": 0.5,
        "rare_classes": None,
        "delta_convention": "fn",
    },
}

_JSON_KEYS = {
    "family": "family",
    "alpha": "alpha",
    "beta": "beta",
    "gamma": "gamma",
    "delta": "delta",
    "lam": "lambda",
    "rare_classes": "rare_classes",
    "ft_alpha": "ft_alpha",
    "ft_beta": "ft_beta",
    "ft_gamma": "ft_gamma",
    "delta_convention": "delta_convention",
}
_FROM_JSON = {v: k for k, v in _JSON_KEYS.items()}

_UNIT = ("alpha", "beta", "delta", "lam", "ft_alpha", "ft_beta")


def validate_spec(spec: LossSpec) -> LossSpec:
    """Validate field ranges and reject fields the family does not use.

    Returns a spec with family defaults filled in.
    """
    if spec.family not in FAMILY_FIELDS:
        raise LossSpecError(
            f"unknown family {spec.family!r}; expected one of {', '.join(FAMILIES)}"
        )
    allowed = FAMILY_FIELDS[spec.family]
    values: dict[str, object] = {}
    for name in _JSON_KEYS:
        if name == "family":
            continue
        val = getattr(spec, name)
        if name not in allowed:
            if val is not None:
                raise LossSpecError(f"field {name!r} is not valid for family {spec.family!r}")
            continue
        values[name] = allowed[name] if val is None else val

    for name in _UNIT:
        if name in values and values[name] is not None:
            v = float(values[name])  # type: ignore[arg-type]
            if not 0.0 <= v <= 1.0:
                raise LossSpecError(f"{name} must lie in [0, 1], got {v}")
            values[name] = v

    if "gamma" in values:
        g = float(values["gamma"])  # type: ignore[arg-type]
        if g < 0.0:
            raise LossSpecError(f"gamma must be >= 0, got {g}")
        if spec.family == "FocalTversky" and g == 0.0:
            raise LossSpecError("gamma=0 is rejected for FocalTversky (exponent 1/gamma)")
        if spec.family in ("UnifiedFocalSym", "UnifiedFocalAsym") and g >= 1.0:
            raise LossSpecError(f"gamma must lie in [0, 1) for {spec.family}, got {g}")
        values["gamma"] = g
    if "ft_gamma" in values:
        g = float(values["ft_gamma"])  # type: ignore[arg-type]
        if g <= 0.0:
            raise LossSpecError(f"ft_gamma must be > 0, got {g}")
        values["ft_gamma"] = g

    if "rare_classes" in values and values["rare_classes"] is not None:
        rare = tuple(sorted(int(c) for c in values["rare_classes"]))  # type: ignore[arg-type]
        if not rare:
            raise LossSpecError("rare_classes must be nonempty when given")
        if any(c < 0 for c in rare):
            raise LossSpecError(f"rare_classes must be nonnegative, got {rare}")
        if spec.family == "UnifiedFocalAsym" and 0 in rare:
            raise LossSpecError("rare_classes must exclude class 0 for UnifiedFocalAsym")
        values["rare_classes"] = rare

    if "delta_convention" in values:
        dc = values["delta_convention"]
        if dc not in ("fn", "fp"):
            raise LossSpecError(f"delta_convention must be 'fn' or 'fp', got {dc!r}")

    return replace(spec, **values)  # type: ignore[arg-type]


def spec_to_json(spec: LossSpec) -> str:
    """Canonical JSON form (omits unset fields, uses the 'lambda' key)."""
    obj: dict[str, object] = {"family": spec.family}
    for name, key in _JSON_KEYS.items():
        if name == "family":
            continue
        val = getattr(spec, name)
        if val is None:
            continue
        obj[key] = list(val) if name == "rare_classes" else val
    return json.dumps(obj, separators=(", ", ": "))


def spec_from_json(text: str | dict) -> LossSpec:
    """Parse and validate a LossSpec from its JSON form."""
    obj = json.loads(text) if isinstance(text, str) else dict(text)
    if not isinstance(obj, dict):
        raise LossSpecError("loss spec JSON must be an object")
    if "family" not in obj:
        raise LossSpecError("loss spec is missing required field 'family'")
    kwargs: dict[str, object] = {}
    for key, val in obj.items():
        if key not in _FROM_JSON:
            raise LossSpecError(f"unknown field {key!r} in loss spec")
        name = _FROM_JSON[key]
        if name == "rare_classes" and val is not None:
            val = tuple(val)
        kwargs[name] = val
    return validate_spec(LossSpec(**kwargs))  # type: ignore[arg-type]


# Named presets (training-protocol defaults for each family).
PRESETS: dict[str, LossSpec] = {
    "ce": validate_spec(LossSpec("CE")),
    "focal": validate_spec(LossSpec("Focal", alpha=0.25, gamma=2.0)),
    "dice": validate_spec(LossSpec("Dice")),
    "tversky": validate_spec(LossSpec("Tversky", alpha=0.3, beta=0.7)),
    "focal_tversky": validate_spec(
        LossSpec("FocalTversky", alpha=0.3, beta=0.7, gamma=4.0 / 3.0)
    ),
    "combo": validate_spec(LossSpec("Combo", alpha=0.5, beta=0.5)),
    "unified_focal_sym": validate_spec(
        LossSpec("UnifiedFocalSym", lam=0.5, delta=0.6, gamma=0.5)
    ),
    "unified_focal_asym": validate_spec(
        LossSpec("UnifiedFocalAsym", lam=0.5, delta=0.6, gamma=0.5)
    ),
}


def presets_json() -> str:
    """Canonical JSON of the preset registry (stable byte-wise)."""
    entries = ",\n".join(
        f'  "{name}": {spec_to_json(spec)}' for name, spec in PRESETS.items()
    )
    return "{\n" + entries + "\n}"


@dataclass
class LossOutput:
    value: float
    grad_logits: np.ndarray
    per_class_terms: list[float] | None = None


@dataclass
class SoftConfusion:
    """Per-class soft cardinalities: tp = sum(p*g), fp = sum(p*(1-g)), fn = sum(g) - tp."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray


# ---------------------------------------------------------------------------
# probability-level forward formulas (public operations)
# ---------------------------------------------------------------------------


def _check_pair(p: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p)
    y = np.asarray(y)
    if p.shape != y.shape:
        raise LossSpecError(f"probability shape {p.shape} != truth shape {y.shape}")
    return p, y


def _pt(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (p * y).sum(axis=-1)


def cross_entropy(p: np.ndarray, y: np.ndarray):
    """Mean over elements of -sum_c y_c log p_c.  Expects clipped p."""
    p, y = _check_pair(p, y)
    return -(np.log(_pt(p, y))).mean()


def focal(p: np.ndarray, y: np.ndarray, alpha: float, gamma: float):
    """Mean of alpha * (1 - p_t)^gamma * (-log p_t)."""
    if gamma < 0:
        raise LossSpecError(f"gamma must be >= 0, got {gamma}")
    p, y = _check_pair(p, y)
    pt = _pt(p, y)
    return (alpha * (1.0 - pt) ** gamma * -np.log(pt)).mean()


def soft_confusion(p: np.ndarray, y: np.ndarray) -> SoftConfusion:
    p, y = _check_pair(p, y)
    axes = tuple(range(p.ndim - 1))
    tp = (p * y).sum(axis=axes)
    fp = (p * (1.0 - y)).sum(axis=axes)
    # subtraction keeps tp + fn == sum(g) exact
    fn = y.sum(axis=axes) - tp
    return SoftConfusion(tp=tp, fp=fp, fn=fn)


def tversky_index(conf: SoftConfusion, alpha: float, beta: float) -> np.ndarray:
    """Smoothed per-class ratio tp / (tp + alpha*fp + beta*fn)."""
    num = conf.tp + EPS_SMOOTH
    den = conf.tp + alpha * conf.fp + beta * conf.fn + EPS_SMOOTH
    return num / den


def tversky_loss(p: np.ndarray, y: np.ndarray, alpha: float, beta: float):
    return (1.0 - tversky_index(soft_confusion(p, y), alpha, beta)).sum()


def dice_loss(p: np.ndarray, y: np.ndarray):
    return tversky_loss(p, y, 0.5, 0.5)


def focal_tversky_loss(p: np.ndarray, y: np.ndarray, alpha: float, beta: float, gamma: float):
    if gamma == 0:
        raise LossSpecError("gamma=0 is rejected for FocalTversky (exponent 1/gamma)")
    ti = tversky_index(soft_confusion(p, y), alpha, beta)
    return ((1.0 - ti) ** (1.0 / gamma)).sum()


def _combo_mce(p: np.ndarray, y: np.ndarray, beta: float):
    """Class-weighted cross entropy: beta on foreground truth, 1-beta on background."""
    pt = _pt(p, y)
    w = np.where(y[..., 0] == 1, 1.0 - beta, beta)
    return (w * -np.log(pt)).mean()


def _combo_dsc(p: np.ndarray, y: np.ndarray):
    """Soft Dice pooled over all classes: 2*sum(p*g) / (sum(p) + sum(g)).

    With softmax probabilities both pooled sums equal the element count,
    so the aggregate reduces to the mean true-class probability.
    """
    return _pt(p, y).mean()


def combo_loss(p: np.ndarray, y: np.ndarray, alpha: float, beta: float):
    """alpha * weighted-CE minus (1 - alpha) * pooled soft Dice (may be negative)."""
    p, y = _check_pair(p, y)
    return alpha * _combo_mce(p, y, beta) - (1.0 - alpha) * _combo_dsc(p, y)


def hybrid_focal_loss(
    p: np.ndarray,
    y: np.ndarray,
    lam: float,
    alpha: float,
    gamma: float,
    ft_alpha: float,
    ft_beta: float,
    ft_gamma: float,
):
    return lam * focal(p, y, alpha, gamma) + (1.0 - lam) * focal_tversky_loss(
        p, y, ft_alpha, ft_beta, ft_gamma
    )


def _rare_weights(y: np.ndarray, delta: float, rare: tuple[int, ...]) -> np.ndarray:
    """Per-element weight: delta where the true class is rare, else 1 - delta."""
    rare_vec = np.zeros(y.shape[-1])
    rare_vec[list(rare)] = 1.0
    is_rare = y @ rare_vec
    return delta * is_rare + (1.0 - delta) * (1.0 - is_rare)


def _resolve_rare(rare: tuple[int, ...] | None, num_classes: int) -> tuple[int, ...]:
    if rare is None:
        return tuple(range(1, num_classes))
    if any(c >= num_classes for c in rare):
        raise LossSpecError(
            f"rare_classes {rare} out of range for {num_classes} classes"
        )
    return rare


def modified_focal(
    p: np.ndarray,
    y: np.ndarray,
    delta: float,
    gamma: float,
    rare: tuple[int, ...] | None = None,
):
    """Class-weighted focal term w * (1 - p_t)^gamma * (-log p_t), mean over elements.

    gamma = 0 turns the modulating factor off, leaving the delta-weighted
    cross entropy.
    """
    if not 0.0 <= gamma < 1.0:
        raise LossSpecError(f"gamma must lie in [0, 1) for the unified variants, got {gamma}")
    p, y = _check_pair(p, y)
    rare = _resolve_rare(rare, y.shape[-1])
    pt = _pt(p, y)
    w = _rare_weights(y, delta, rare)
    return (w * (1.0 - pt) ** gamma * -np.log(pt)).mean()


def _mti(p: np.ndarray, y: np.ndarray, delta: float, convention: str) -> np.ndarray:
    """Tversky ratio with delta on FN and 1-delta on FP (or flipped)."""
    conf = soft_confusion(p, y)
    if convention == "fn":
        return tversky_index(conf, 1.0 - delta, delta)
    return tversky_index(conf, delta, 1.0 - delta)


def modified_focal_tversky(
    p: np.ndarray,
    y: np.ndarray,
    delta: float,
    gamma: float,
    convention: str = "fn",
):
    """Sum over classes of (1 - mTI)^(1 - gamma); gamma = 0 gives the plain Tversky sum."""
    if not 0.0 <= gamma < 1.0:
        raise LossSpecError(f"gamma must lie in [0, 1) for the unified variants, got {gamma}")
    mti = _mti(p, y, delta, convention)
    return ((1.0 - mti) ** (1.0 - gamma)).sum()


def asym_focal_parts(
    p: np.ndarray,
    y: np.ndarray,
    delta: float,
    gamma: float,
    rare: tuple[int, ...] | None = None,
):
    """(rare, non-rare) contributions to the asymmetric focal mean.

    The rare part carries no focal exponent, so it is literally
    independent of gamma.
    """
    if not 0.0 <= gamma < 1.0:
        raise LossSpecError(f"gamma must lie in [0, 1) for the unified variants, got {gamma}")
    p, y = _check_pair(p, y)
    rare = _resolve_rare(rare, y.shape[-1])
    pt = _pt(p, y)
    rare_vec = np.zeros(y.shape[-1])
    rare_vec[list(rare)] = 1.0
    is_rare = y @ rare_vec
    n = pt.size
    rare_part = (is_rare * delta * -np.log(pt)).sum() / n
    nonrare_part = (
        (1.0 - is_rare) * (1.0 - delta) * (1.0 - pt) ** gamma * -np.log(pt)
    ).sum() / n
    return rare_part, nonrare_part


def asym_focal(p, y, delta, gamma, rare=None):
    rare_part, nonrare_part = asym_focal_parts(p, y, delta, gamma, rare)
    return rare_part + nonrare_part


def asym_focal_tversky(
    p: np.ndarray,
    y: np.ndarray,
    delta: float,
    gamma: float,
    rare: tuple[int, ...] | None = None,
    convention: str = "fn",
):
    """Region sum keeping the focal exponent only on rare classes."""
    if not 0.0 <= gamma < 1.0:
        raise LossSpecError(f"gamma must lie in [0, 1) for the unified variants, got {gamma}")
    p, y = _check_pair(p, y)
    rare = _resolve_rare(rare, y.shape[-1])
    mti = _mti(p, y, delta, convention)
    terms = 1.0 - mti
    out = terms.copy()
    for c in rare:
        out[c] = terms[c] ** (1.0 - gamma)
    return out.sum()


def unified_focal(
    p: np.ndarray,
    y: np.ndarray,
    lam: float,
    delta: float,
    gamma: float,
    variant: str,
    rare: tuple[int, ...] | None = None,
    convention: str = "fn",
):
    """lam-weighted mix of the (modified or asymmetric) focal and region components."""
    if variant == "sym":
        f = modified_focal(p, y, delta, gamma, rare)
        r = modified_focal_tversky(p, y, delta, gamma, convention)
    elif variant == "asym":
        f = asym_focal(p, y, delta, gamma, rare)
        r = asym_focal_tversky(p, y, delta, gamma, rare, convention)
    else:
        raise LossSpecError(f"variant must be 'sym' or 'asym', got {variant!r}")
    return lam * f + (1.0 - lam) * r


# ---------------------------------------------------------------------------
# value + gradient (with respect to clipped probabilities)
# ---------------------------------------------------------------------------


def _pixel_grad(y: np.ndarray, dldpt: np.ndarray) -> np.ndarray:
    # pixel losses touch only the true-class column
    return y * dldpt[..., None]


def _vg_ce(p, y, s: LossSpec):
    pt = _pt(p, y)
    n = pt.size
    value = -np.log(pt).mean()
    grad = _pixel_grad(y, -1.0 / (pt * n))
    return value, grad, None


def _focal_term_grad(pt, w, gamma):
    """d/dp_t of w * (1-p_t)^gamma * (-log p_t)."""
    one_m = 1.0 - pt
    log_term = -np.log(pt)
    return w * (-gamma * one_m ** (gamma - 1.0) * log_term - one_m**gamma / pt)


def _vg_focal(p, y, s: LossSpec):
    pt = _pt(p, y)
    n = pt.size
    value = (s.alpha * (1.0 - pt) ** s.gamma * -np.log(pt)).mean()
    grad = _pixel_grad(y, _focal_term_grad(pt, s.alpha, s.gamma) / n)
    return value, grad, None


def _ti_and_grads(p, y, alpha, beta):
    """Per-class TI plus its partials wrt tp/fp/fn."""
    conf = soft_confusion(p, y)
    num = conf.tp + EPS_SMOOTH
    den = conf.tp + alpha * conf.fp + beta * conf.fn + EPS_SMOOTH
    ti = num / den
    inv_d2 = 1.0 / (den * den)
    d_tp = (alpha * conf.fp + beta * conf.fn) * inv_d2
    d_fp = -alpha * num * inv_d2
    d_fn = -beta * num * inv_d2
    return ti, d_tp, d_fp, d_fn


def _ti_grad_p(y, d_tp, d_fp, d_fn):
    """dTI_c/dp_ic laid out over the full tensor."""
    return y * (d_tp - d_fn) + (1.0 - y) * d_fp


def _pow_term(base: np.ndarray, expo: float):
    """(value, derivative) of base**expo with a floored base inside the derivative."""
    value = base**expo
    safe = np.maximum(base, _POW_FLOOR)
    deriv = expo * safe ** (expo - 1.0)
    return value, deriv


def _vg_region(p, y, alpha, beta, expo):
    """sum_c (1 - TI_c)^expo with gradient; expo may be 1."""
    ti, d_tp, d_fp, d_fn = _ti_and_grads(p, y, alpha, beta)
    terms, dterm = _pow_term(1.0 - ti, expo)
    value = terms.sum()
    # dL/dTI_c = -dterm_c
    grad = _ti_grad_p(y, d_tp, d_fp, d_fn) * -dterm
    return value, grad, [float(t) for t in terms]


def _vg_dice(p, y, s: LossSpec):
    return _vg_region(p, y, 0.5, 0.5, 1.0)


def _vg_tversky(p, y, s: LossSpec):
    return _vg_region(p, y, s.alpha, s.beta, 1.0)


def _vg_focal_tversky(p, y, s: LossSpec):
    return _vg_region(p, y, s.alpha, s.beta, 1.0 / s.gamma)


def _vg_combo(p, y, s: LossSpec):
    pt = _pt(p, y)
    n = pt.size
    w = np.where(y[..., 0] == 1, 1.0 - s.beta, s.beta)
    mce = (w * -np.log(pt)).mean()
    grad_mce = _pixel_grad(y, -w / (pt * n))

    # pooled soft Dice = mean true-class probability; d/dp = g / n
    dsc = pt.mean()
    grad_dsc = y / n

    value = s.alpha * mce - (1.0 - s.alpha) * dsc
    grad = s.alpha * grad_mce - (1.0 - s.alpha) * grad_dsc
    axes = tuple(range(p.ndim - 1))
    per_class = (p * y).sum(axis=axes) / n
    terms = [-(1.0 - s.alpha) * float(t) for t in per_class]
    return value, grad, terms


def _vg_hybrid_focal(p, y, s: LossSpec):
    fv, fg, _ = _vg_focal(p, y, s)
    rv, rg, rterms = _vg_region(p, y, s.ft_alpha, s.ft_beta, 1.0 / s.ft_gamma)
    value = s.lam * fv + (1.0 - s.lam) * rv
    grad = s.lam * fg + (1.0 - s.lam) * rg
    terms = [(1.0 - s.lam) * t for t in rterms]
    return value, grad, terms


def _mti_weights(s: LossSpec):
    if s.delta_convention == "fn":
        return 1.0 - s.delta, s.delta
    return s.delta, 1.0 - s.delta


def _vg_modified_focal(p, y, s: LossSpec, rare):
    pt = _pt(p, y)
    n = pt.size
    w = _rare_weights(y, s.delta, rare)
    value = (w * (1.0 - pt) ** s.gamma * -np.log(pt)).mean()
    grad = _pixel_grad(y, _focal_term_grad(pt, w, s.gamma) / n)
    return value, grad


def _vg_asym_focal(p, y, s: LossSpec, rare):
    pt = _pt(p, y)
    n = pt.size
    rare_vec = np.zeros(y.shape[-1])
    rare_vec[list(rare)] = 1.0
    is_rare = y @ rare_vec
    log_term = -np.log(pt)
    value = (
        (is_rare * s.delta * log_term).sum()
        + ((1.0 - is_rare) * (1.0 - s.delta) * (1.0 - pt) ** s.gamma * log_term).sum()
    ) / n
    dldpt = np.where(
        is_rare == 1.0,
        -s.delta / pt,
        _focal_term_grad(pt, 1.0 - s.delta, s.gamma),
    )
    grad = _pixel_grad(y, dldpt / n)
    return value, grad


def _vg_region_asym(p, y, s: LossSpec, rare):
    alpha, beta = _mti_weights(s)
    ti, d_tp, d_fp, d_fn = _ti_and_grads(p, y, alpha, beta)
    base = 1.0 - ti
    expo = np.ones_like(base)
    for c in rare:
        expo[c] = 1.0 - s.gamma
    terms = base**expo
    safe = np.maximum(base, _POW_FLOOR)
    dterm = expo * safe ** (expo - 1.0)
    value = terms.sum()
    grad = _ti_grad_p(y, d_tp, d_fp, d_fn) * -dterm
    return value, grad, [float(t) for t in terms]


def _vg_unified(p, y, s: LossSpec, variant: str):
    rare = _resolve_rare(s.rare_classes, y.shape[-1])
    if variant == "sym":
        fv, fg = _vg_modified_focal(p, y, s, rare)
        alpha, beta = _mti_weights(s)
        rv, rg, rterms = _vg_region(p, y, alpha, beta, 1.0 - s.gamma)
    else:
        fv, fg = _vg_asym_focal(p, y, s, rare)
        rv, rg, rterms = _vg_region_asym(p, y, s, rare)
    value = s.lam * fv + (1.0 - s.lam) * rv
    grad = s.lam * fg + (1.0 - s.lam) * rg
    terms = [(1.0 - s.lam) * t for t in rterms]
    return value, grad, terms


_DISPATCH: dict[str, Callable] = {
    "CE": _vg_ce,
    "Focal": _vg_focal,
    "Dice": _vg_dice,
    "Tversky": _vg_tversky,
    "FocalTversky": _vg_focal_tversky,
    "Combo": _vg_combo,
    "HybridFocal": _vg_hybrid_focal,
    "UnifiedFocalSym": lambda p, y, s: _vg_unified(p, y, s, "sym"),
    "UnifiedFocalAsym": lambda p, y, s: _vg_unified(p, y, s, "asym"),
}

# value-only routes through the public forward formulas (no gradient work)
_VALUE_DISPATCH: dict[str, Callable] = {
    "CE": lambda p, y, s: cross_entropy(p, y),
    "Focal": lambda p, y, s: focal(p, y, s.alpha, s.gamma),
    "Dice": lambda p, y, s: dice_loss(p, y),
    "Tversky": lambda p, y, s: tversky_loss(p, y, s.alpha, s.beta),
    "FocalTversky": lambda p, y, s: focal_tversky_loss(p, y, s.alpha, s.beta, s.gamma),
    "Combo": lambda p, y, s: combo_loss(p, y, s.alpha, s.beta),
    "HybridFocal": lambda p, y, s: hybrid_focal_loss(
        p, y, s.lam, s.alpha, s.gamma, s.ft_alpha, s.ft_beta, s.ft_gamma
    ),
    "UnifiedFocalSym": lambda p, y, s: unified_focal(
        p, y, s.lam, s.delta, s.gamma, "sym", s.rare_classes, s.delta_convention
    ),
    "UnifiedFocalAsym": lambda p, y, s: unified_focal(
        p, y, s.lam, s.delta, s.gamma, "asym", s.rare_classes, s.delta_convention
    ),
}


# ---------------------------------------------------------------------------
# logits-level entry points
# ---------------------------------------------------------------------------


def _prepare(spec: LossSpec, logits: np.ndarray, truth: np.ndarray):
    spec = validate_spec(spec)
    logits = np.asarray(logits)
    truth = np.asarray(truth)
    if logits.shape != truth.shape:
        raise LossSpecError(f"logits shape {logits.shape} != truth shape {truth.shape}")
    if logits.ndim < 2:
        raise LossSpecError("logits need at least (elements, classes) axes")
    if logits.shape[-1] < 2:
        raise LossSpecError("need at least two class channels (background is class 0)")
    require_finite(logits, "logits")
    validate_one_hot(truth)
    return spec, logits, truth


def value_on_probs(spec: LossSpec, p: np.ndarray, truth: np.ndarray):
    """Loss value on (already clipped) probabilities."""
    spec = validate_spec(spec)
    y = np.asarray(truth, dtype=p.dtype)
    return _VALUE_DISPATCH[spec.family](p, y, spec)


def _value_unchecked(spec: LossSpec, logits: np.ndarray, truth: np.ndarray):
    """Value path without input validation (spec/tensors already checked)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = np.clip(e / e.sum(axis=-1, keepdims=True), EPS_CLIP, 1.0 - EPS_CLIP)
    return _VALUE_DISPATCH[spec.family](p, truth, spec)


def loss_value(spec: LossSpec, logits: np.ndarray, truth: np.ndarray):
    """Value-only path, preserving the input float dtype (used by the FD oracle)."""
    spec, logits, truth = _prepare(spec, logits, truth)
    dtype = logits.dtype if np.issubdtype(logits.dtype, np.floating) else np.float64
    return _value_unchecked(spec, logits, np.asarray(truth, dtype=dtype))


def per_image_values(spec: LossSpec, logits: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Loss value of every image in a batch, in one vectorized pass.

    Equivalent to evaluating each (1, ...) slice separately: pixel losses
    average per image, region losses use per-image soft counts.
    """
    spec, logits, truth = _prepare(spec, logits, truth)
    if logits.ndim < 3:
        raise LossSpecError("per_image_values needs (batch, ..., classes) input")
    p = clip_probs(softmax(logits))
    y = np.asarray(truth, dtype=p.dtype)
    s = spec
    pt = _pt(p, y)
    pix_ax = tuple(range(1, pt.ndim))
    spat_ax = tuple(range(1, p.ndim - 1))

    def pixel_mean(terms):
        return terms.mean(axis=pix_ax)

    def ti(alpha, beta):
        tp = (p * y).sum(axis=spat_ax)
        fp = (p * (1.0 - y)).sum(axis=spat_ax)
        fn = y.sum(axis=spat_ax) - tp
        return (tp + EPS_SMOOTH) / (tp + alpha * fp + beta * fn + EPS_SMOOTH)

    def region(alpha, beta, expo):
        return ((1.0 - ti(alpha, beta)) ** expo).sum(axis=1)

    fam = s.family
    if fam == "CE":
        return pixel_mean(-np.log(pt))
    if fam == "Focal":
        return pixel_mean(s.alpha * (1.0 - pt) ** s.gamma * -np.log(pt))
    if fam == "Dice":
        return region(0.5, 0.5, 1.0)
    if fam == "Tversky":
        return region(s.alpha, s.beta, 1.0)
    if fam == "FocalTversky":
        return region(s.alpha, s.beta, 1.0 / s.gamma)
    if fam == "Combo":
        w = np.where(y[..., 0] == 1, 1.0 - s.beta, s.beta)
        return s.alpha * pixel_mean(w * -np.log(pt)) - (1.0 - s.alpha) * pixel_mean(pt)
    if fam == "HybridFocal":
        f = pixel_mean(s.alpha * (1.0 - pt) ** s.gamma * -np.log(pt))
        return s.lam * f + (1.0 - s.lam) * region(s.ft_alpha, s.ft_beta, 1.0 / s.ft_gamma)
    rare = _resolve_rare(s.rare_classes, p.shape[-1])
    mti_a, mti_b = (1.0 - s.delta, s.delta) if s.delta_convention == "fn" else (
        s.delta, 1.0 - s.delta)
    if fam == "UnifiedFocalSym":
        w = _rare_weights(y, s.delta, rare)
        f = pixel_mean(w * (1.0 - pt) ** s.gamma * -np.log(pt))
        return s.lam * f + (1.0 - s.lam) * region(mti_a, mti_b, 1.0 - s.gamma)
    if fam == "UnifiedFocalAsym":
        rare_vec = np.zeros(p.shape[-1])
        rare_vec[list(rare)] = 1.0
        is_rare = y @ rare_vec
        log_term = -np.log(pt)
        f = pixel_mean(
            is_rare * s.delta * log_term
            + (1.0 - is_rare) * (1.0 - s.delta) * (1.0 - pt) ** s.gamma * log_term
        )
        base = 1.0 - ti(mti_a, mti_b)
        expo = np.ones(p.shape[-1])
        expo[list(rare)] = 1.0 - s.gamma
        return s.lam * f + (1.0 - s.lam) * (base**expo).sum(axis=1)
    raise AssertionError(f"unhandled family {fam}")


def evaluate(spec: LossSpec, logits: np.ndarray, truth: np.ndarray) -> LossOutput:
    """Loss value plus analytic gradient with respect to the logits.

    Computed in the dtype of ``logits`` (float64 for oracle paths,
    float32 permitted for training paths); integer logits upcast to
    float64.
    """
    spec, logits, truth = _prepare(spec, logits, truth)
    if not np.issubdtype(logits.dtype, np.floating):
        logits = logits.astype(np.float64)
    y = np.asarray(truth, dtype=logits.dtype)
    p_raw = softmax(logits)
    p = clip_probs(p_raw)
    value, dldp, terms = _DISPATCH[spec.family](p, y, spec)
    # chain rule through clip (zero slope where saturated) and softmax
    q = dldp * ((p_raw > EPS_CLIP) & (p_raw < 1.0 - EPS_CLIP))
    s = (q * p_raw).sum(axis=-1, keepdims=True)
    grad = p_raw * (q - s)
    return LossOutput(value=float(value), grad_logits=grad, per_class_terms=terms)


def gradient(spec: LossSpec, logits: np.ndarray, truth: np.ndarray) -> np.ndarray:
    return evaluate(spec, logits, truth).grad_logits
