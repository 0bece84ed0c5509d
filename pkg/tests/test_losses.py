import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imloss import losses
from imloss.losses import (
    FAMILIES,
    PRESETS,
    LossSpec,
    LossSpecError,
    evaluate,
    gradient,
    loss_value,
    spec_from_json,
    spec_to_json,
    validate_spec,
)
from imloss.numerics import clip_probs, one_hot, softmax

S = losses.EPS_SMOOTH


def rand_pair(rng, shape):
    logits = rng.uniform(-3.0, 3.0, size=shape)
    truth = one_hot(rng.integers(0, shape[-1], size=shape[:-1]), shape[-1])
    return logits, truth


def rand_probs(rng, shape):
    logits, truth = rand_pair(rng, shape)
    return clip_probs(softmax(logits)), truth


class TestForwardValues:
    """Hand-derived scalar cases (expected values recomputed with mpmath)."""

    def test_cross_entropy_single_pixel(self):
        p = np.array([[0.3, 0.7]])
        y = np.array([[0.0, 1.0]])
        # -ln 0.7
        assert losses.cross_entropy(p, y) == pytest.approx(0.35667494393873237, abs=1e-12)

    def test_cross_entropy_two_pixels(self):
        # (y=1, p_fore=0.9) and (y=0, p_fore=0.1): both contribute -ln 0.9
        p = np.array([[0.1, 0.9], [0.9, 0.1]])
        y = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert losses.cross_entropy(p, y) == pytest.approx(0.1053605156578263, abs=1e-12)

    def test_cross_entropy_perfect(self):
        y = np.array([[0.0, 1.0], [1.0, 0.0]])
        p = clip_probs(y)
        assert losses.cross_entropy(p, y) <= 1e-6

    def test_focal_suppressed(self):
        p = np.array([[0.2, 0.8]])
        y = np.array([[0.0, 1.0]])
        # 0.25 * 0.2^2 * (-ln 0.8)
        assert losses.focal(p, y, 0.25, 2.0) == pytest.approx(
            0.0022314355131421, abs=1e-12
        )

    def test_focal_half(self):
        p = np.array([[0.5, 0.5]])
        y = np.array([[0.0, 1.0]])
        # 0.25 * 0.25 * ln 2
        assert losses.focal(p, y, 0.25, 2.0) == pytest.approx(
            0.0433216987849966, abs=1e-12
        )

    def test_focal_gamma_zero_is_ce(self):
        rng = np.random.default_rng(0)
        p, y = rand_probs(rng, (2, 4, 4, 2))
        assert losses.focal(p, y, 1.0, 0.0) == losses.cross_entropy(p, y)

    def test_soft_confusion_counts(self):
        p = np.array([0.8, 0.6, 0.3]).reshape(3, 1)
        g = np.array([1.0, 1.0, 0.0]).reshape(3, 1)
        conf = losses.soft_confusion(p, g)
        assert conf.tp[0] == pytest.approx(1.4, abs=1e-15)
        assert conf.fp[0] == pytest.approx(0.3, abs=1e-15)
        assert conf.fn[0] == pytest.approx(0.6, abs=1e-15)

    def test_soft_confusion_tp_plus_fn_exact(self):
        rng = np.random.default_rng(1)
        p, y = rand_probs(rng, (3, 5, 5, 3))
        conf = losses.soft_confusion(p, y)
        axes = tuple(range(y.ndim - 1))
        assert np.array_equal(conf.tp + conf.fn, y.sum(axis=axes))

    def test_tversky_index_weighted(self):
        p = np.array([0.8, 0.6, 0.3]).reshape(3, 1)
        g = np.array([1.0, 1.0, 0.0]).reshape(3, 1)
        ti = losses.tversky_index(losses.soft_confusion(p, g), 0.3, 0.7)
        # (1.4 + s) / (1.91 + s), mpmath
        assert ti[0] == pytest.approx(0.7329844329924435, abs=1e-12)

    def test_tversky_balanced_equals_soft_dsc(self):
        p = np.array([0.8, 0.6, 0.3]).reshape(3, 1)
        g = np.array([1.0, 1.0, 0.0]).reshape(3, 1)
        ti = losses.tversky_index(losses.soft_confusion(p, g), 0.5, 0.5)
        # (1.4 + s) / (1.85 + s)
        assert ti[0] == pytest.approx(0.7567568882395199, abs=1e-12)

    def test_tversky_degenerate_class_scores_one(self):
        p = np.zeros((4, 1))
        g = np.zeros((4, 1))
        ti = losses.tversky_index(losses.soft_confusion(p, g), 0.3, 0.7)
        assert ti[0] == 1.0

    def test_per_class_losses(self):
        p = np.array([0.8, 0.6, 0.3]).reshape(3, 1)
        g = np.array([1.0, 1.0, 0.0]).reshape(3, 1)
        ti = losses.tversky_index(losses.soft_confusion(p, g), 0.3, 0.7)
        assert (1.0 - ti[0]) == pytest.approx(0.2670155670075565, abs=1e-12)
        # (1 - TI)^(1/gamma) at gamma = 4/3, mpmath
        assert (1.0 - ti[0]) ** 0.75 == pytest.approx(0.3714517733891956, abs=1e-12)

    def test_dice_on_perfect_prediction(self):
        y = one_hot(np.array([[0, 1], [1, 0]]), 2)
        p = clip_probs(y)
        assert losses.dice_loss(p, y) <= 1e-6

    def test_focal_tversky_rejects_gamma_zero(self):
        p = np.ones((2, 2)) * 0.5
        with pytest.raises(LossSpecError, match="gamma=0"):
            losses.focal_tversky_loss(p, p, 0.3, 0.7, 0.0)

    def test_combo_single_pixel(self):
        p = np.array([[0.2, 0.8]])
        y = np.array([[0.0, 1.0]])
        # 0.5*(0.5*(-ln 0.8)) - 0.5*(1.6/2.0), mpmath
        assert losses.combo_loss(p, y, 0.5, 0.5) == pytest.approx(
            -0.3442141121714476, abs=1e-12
        )

    def test_combo_perfect(self):
        y = one_hot(np.array([[0, 1], [1, 0]]), 2)
        p = clip_probs(y)
        assert losses.combo_loss(p, y, 0.5, 0.5) == pytest.approx(-0.5, abs=1e-5)

    def test_combo_mce_beta_half_is_half_ce(self):
        rng = np.random.default_rng(2)
        p, y = rand_probs(rng, (2, 3, 3, 2))
        assert losses._combo_mce(p, y, 0.5) == pytest.approx(
            0.5 * losses.cross_entropy(p, y), abs=1e-15
        )

    def test_hybrid_focal_linearity(self):
        rng = np.random.default_rng(3)
        p, y = rand_probs(rng, (2, 3, 3, 2))
        kwargs = dict(alpha=0.25, gamma=2.0, ft_alpha=0.3, ft_beta=0.7, ft_gamma=4 / 3)
        a = losses.hybrid_focal_loss(p, y, 1.0, **kwargs)
        b = losses.hybrid_focal_loss(p, y, 0.0, **kwargs)
        mid = losses.hybrid_focal_loss(p, y, 0.5, **kwargs)
        assert a == losses.focal(p, y, 0.25, 2.0)
        assert b == losses.focal_tversky_loss(p, y, 0.3, 0.7, 4 / 3)
        assert mid == pytest.approx((a + b) / 2.0, abs=1e-12)


class TestModifiedAndAsymmetric:
    def test_modified_focal_rare_pixel(self):
        p = np.array([[0.2, 0.8]])
        y = np.array([[0.0, 1.0]])
        # 0.6 * sqrt(0.2) * (-ln 0.8), mpmath
        assert losses.modified_focal(p, y, 0.6, 0.5) == pytest.approx(
            0.0598756979375143, abs=1e-12
        )

    def test_modified_focal_tversky_example(self):
        # one-vs-rest view of class 1 with p = [0.8, 0.6, 0.3], g = [1, 1, 0]
        p1 = np.array([0.8, 0.6, 0.3])
        p = np.stack([1.0 - p1, p1], axis=-1)
        g = one_hot(np.array([1, 1, 0]), 2)
        mti = losses._mti(p, g, 0.6, "fn")
        # (1.4 + s) / (1.4 + 0.6*0.6 + 0.4*0.3 + s)
        assert mti[1] == pytest.approx(0.7446809868718155, abs=1e-12)
        assert (1.0 - mti[1]) ** 0.5 == pytest.approx(0.5052910182540201, abs=1e-12)

    def test_gamma_zero_recovers_weighted_ce_and_tversky_sum(self):
        rng = np.random.default_rng(4)
        p, y = rand_probs(rng, (2, 4, 4, 2))
        # focal side at gamma=0, delta=0.5: exactly 0.5 * CE
        assert losses.modified_focal(p, y, 0.5, 0.0) == pytest.approx(
            0.5 * losses.cross_entropy(p, y), abs=1e-12
        )
        # region side at gamma=0, delta=0.5: exactly the Dice loss
        assert losses.modified_focal_tversky(p, y, 0.5, 0.0) == pytest.approx(
            losses.dice_loss(p, y), abs=1e-15
        )

    def test_gamma_one_rejected(self):
        p = np.full((2, 2), 0.5)
        with pytest.raises(LossSpecError, match="gamma"):
            losses.modified_focal(p, p, 0.6, 1.0)

    def test_delta_convention_flip(self):
        rng = np.random.default_rng(5)
        p, y = rand_probs(rng, (1, 4, 4, 2))
        fn_side = losses.modified_focal_tversky(p, y, 0.7, 0.3, "fn")
        fp_side = losses.modified_focal_tversky(p, y, 0.3, 0.3, "fp")
        assert fn_side == pytest.approx(fp_side, abs=1e-15)

    def test_asym_rare_term_independent_of_gamma(self):
        rng = np.random.default_rng(6)
        p, y = rand_probs(rng, (1, 4, 4, 2))
        parts = [losses.asym_focal_parts(p, y, 0.6, g)[0] for g in (0.2, 0.5, 0.8)]
        assert parts[0] == parts[1] == parts[2]  # bit-identical

    def test_asym_focal_tversky_rare_exponent(self):
        p1 = np.array([0.8, 0.6, 0.3])
        p = np.stack([1.0 - p1, p1], axis=-1)
        g = one_hot(np.array([1, 1, 0]), 2)
        mti = losses._mti(p, g, 0.6, "fn")
        total = losses.asym_focal_tversky(p, g, 0.6, 0.2, rare=(1,))
        # non-rare class keeps exponent 1; rare class gets (1 - mTI)^0.8
        expected = (1.0 - mti[0]) + (1.0 - mti[1]) ** 0.8
        assert total == pytest.approx(expected, abs=1e-15)
        assert (1.0 - mti[1]) ** 0.8 == pytest.approx(0.3354799160617329, abs=1e-12)

    def test_asym_equals_modified_at_gamma_zero(self):
        rng = np.random.default_rng(7)
        p, y = rand_probs(rng, (2, 4, 4, 3))
        rare = (1, 2)
        assert losses.asym_focal(p, y, 0.6, 0.0, rare) == pytest.approx(
            losses.modified_focal(p, y, 0.6, 0.0, rare), abs=1e-15
        )
        assert losses.asym_focal_tversky(p, y, 0.6, 0.0, rare) == pytest.approx(
            losses.modified_focal_tversky(p, y, 0.6, 0.0), abs=1e-15
        )


class TestRecoveryLattice:
    """Hyperparameter settings under which one family reduces to another."""

    @pytest.mark.parametrize("seed", range(5))
    def test_all_edges(self, seed):
        rng = np.random.default_rng(seed)
        shape = (
            int(rng.integers(1, 5)),
            int(rng.integers(2, 9)),
            int(rng.integers(2, 9)),
            2,
        )
        z, y = rand_pair(rng, shape)

        def v(**kw):
            return loss_value(validate_spec(LossSpec(**kw)), z, y)

        assert v(family="Focal", alpha=1.0, gamma=0.0) == pytest.approx(
            v(family="CE"), abs=1e-9
        )
        assert v(family="Tversky", alpha=0.5, beta=0.5) == pytest.approx(
            v(family="Dice"), abs=1e-9
        )
        assert v(family="FocalTversky", gamma=1.0) == pytest.approx(
            v(family="Tversky"), abs=1e-9
        )
        assert v(family="HybridFocal", lam=1.0) == pytest.approx(
            v(family="Focal"), abs=1e-9
        )
        assert v(family="HybridFocal", lam=0.0) == pytest.approx(
            v(family="FocalTversky"), abs=1e-9
        )
        # Unified Focal at gamma=0, delta=0.5 interpolates the (0.5-weighted)
        # cross entropy and the Dice loss
        assert v(family="UnifiedFocalSym", gamma=0.0, delta=0.5, lam=0.0) == pytest.approx(
            v(family="Dice"), abs=1e-9
        )
        assert v(family="UnifiedFocalSym", gamma=0.0, delta=0.5, lam=1.0) == pytest.approx(
            0.5 * v(family="CE"), abs=1e-9
        )
        assert v(
            family="UnifiedFocalAsym", gamma=0.0, delta=0.7, lam=0.3
        ) == pytest.approx(v(family="UnifiedFocalSym", gamma=0.0, delta=0.7, lam=0.3), abs=1e-9)


class TestSuppressionEnhancement:
    def test_focal_side_below_weighted_ce(self):
        # single rare pixel across a p_t grid: modulated term never exceeds
        # the delta-weighted cross entropy
        for pt in np.linspace(0.01, 0.99, 99):
            p = np.array([[1.0 - pt, pt]])
            y = np.array([[0.0, 1.0]])
            assert losses.modified_focal(p, y, 0.6, 0.5) <= 0.6 * -math.log(pt) + 1e-15

    def test_region_side_enhances(self):
        for t in np.linspace(0.0, 1.0, 101):
            assert (1.0 - t) ** 0.5 >= (1.0 - t) - 1e-15

    def test_nonnegative_except_combo(self):
        rng = np.random.default_rng(8)
        for fam in FAMILIES:
            spec = validate_spec(LossSpec(fam))
            for _ in range(5):
                z, y = rand_pair(rng, (1, 4, 4, 2))
                val = loss_value(spec, z, y)
                assert np.isfinite(val)
                if fam != "Combo":
                    assert val >= 0.0


class TestPermutationEquivariance:
    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_losses_ignore_element_order(self, seed):
        rng = np.random.default_rng(seed)
        z, y = rand_pair(rng, (12, 2))
        perm = rng.permutation(12)
        for fam in FAMILIES:
            spec = validate_spec(LossSpec(fam))
            assert loss_value(spec, z, y) == pytest.approx(
                loss_value(spec, z[perm], y[perm]), abs=1e-12
            )


class TestGradients:
    def test_ce_softmax_identity(self):
        rng = np.random.default_rng(9)
        z, y = rand_pair(rng, (2, 3, 3, 2))
        n = 18
        grad = gradient(PRESETS["ce"], z, y)
        expected = (softmax(z) - y) / n
        assert np.abs(grad - expected).max() < 1e-12

    def test_dice_perfect_gradient_small(self):
        y = one_hot(np.tile(np.array([[0, 1]]), (4, 4)).reshape(4, 8) % 2, 2)
        z = np.where(y == 1.0, 40.0, -40.0)  # confident correct logits
        grad = gradient(PRESETS["dice"], z, y)
        assert np.abs(grad).max() <= 1e-6

    def test_gradient_matches_evaluate(self):
        rng = np.random.default_rng(10)
        z, y = rand_pair(rng, (1, 4, 4, 3))
        spec = PRESETS["unified_focal_asym"]
        out = evaluate(spec, z, y)
        assert np.array_equal(out.grad_logits, gradient(spec, z, y))
        assert np.all(np.isfinite(out.grad_logits))

    def test_per_class_terms_sum_to_region_component(self):
        rng = np.random.default_rng(11)
        z, y = rand_pair(rng, (2, 4, 4, 3))
        for fam, region_of in [
            ("Dice", lambda s, p, g: losses.dice_loss(p, g)),
            ("Tversky", lambda s, p, g: losses.tversky_loss(p, g, s.alpha, s.beta)),
            (
                "UnifiedFocalSym",
                lambda s, p, g: (1 - s.lam)
                * losses.modified_focal_tversky(p, g, s.delta, s.gamma),
            ),
        ]:
            spec = validate_spec(LossSpec(fam))
            out = evaluate(spec, z, y)
            p = clip_probs(softmax(z))
            assert sum(out.per_class_terms) == pytest.approx(
                float(region_of(spec, p, y)), abs=1e-12
            )

    def test_fractional_power_at_perfect_prediction_no_nan(self):
        y = one_hot(np.ones((1, 3, 3), dtype=int), 2)
        # all-foreground truth makes fp exactly 0 after clipping is the
        # worst case for (1 - TI)^(expo - 1)
        z = np.where(y == 1.0, 50.0, -50.0)
        for fam in ("FocalTversky", "UnifiedFocalSym", "UnifiedFocalAsym"):
            out = evaluate(validate_spec(LossSpec(fam)), z, y)
            assert np.all(np.isfinite(out.grad_logits))


class TestSpecValidation:
    def test_unknown_family(self):
        with pytest.raises(LossSpecError, match="unknown family"):
            validate_spec(LossSpec("Dicey"))

    def test_field_not_valid_for_family(self):
        with pytest.raises(LossSpecError, match="not valid for family"):
            validate_spec(LossSpec("CE", gamma=2.0))

    def test_unit_interval_enforced(self):
        with pytest.raises(LossSpecError, match="alpha"):
            validate_spec(LossSpec("Tversky", alpha=1.5))

    def test_rare_classes_exclude_background_for_asym(self):
        with pytest.raises(LossSpecError, match="exclude class 0"):
            validate_spec(LossSpec("UnifiedFocalAsym", rare_classes=(0, 1)))

    def test_rare_classes_nonempty(self):
        with pytest.raises(LossSpecError, match="nonempty"):
            validate_spec(LossSpec("UnifiedFocalSym", rare_classes=()))

    def test_unified_gamma_below_one(self):
        with pytest.raises(LossSpecError, match="gamma"):
            validate_spec(LossSpec("UnifiedFocalSym", gamma=1.0))

    def test_shape_mismatch(self):
        z = np.zeros((2, 3, 2))
        y = one_hot(np.zeros((2, 4), dtype=int), 2)
        with pytest.raises(LossSpecError, match="shape"):
            evaluate(PRESETS["ce"], z, y)

    def test_defaults_filled(self):
        spec = validate_spec(LossSpec("Focal"))
        assert spec.alpha == 0.25 and spec.gamma == 2.0


class TestSpecJson:
    def test_round_trip(self):
        spec = validate_spec(
            LossSpec("UnifiedFocalAsym", lam=0.25, delta=0.7, gamma=0.3, rare_classes=(1, 2))
        )
        back = spec_from_json(spec_to_json(spec))
        assert back == spec

    def test_lambda_key(self):
        spec = spec_from_json('{"family": "HybridFocal", "lambda": 0.25}')
        assert spec.lam == 0.25

    def test_unknown_field_rejected(self):
        with pytest.raises(LossSpecError, match="unknown field"):
            spec_from_json('{"family": "CE", "smoothing": 1}')

    def test_missing_family(self):
        with pytest.raises(LossSpecError, match="family"):
            spec_from_json('{"alpha": 0.5}')

    def test_presets_protocol_defaults(self):
        assert PRESETS["focal"].alpha == 0.25 and PRESETS["focal"].gamma == 2.0
        assert PRESETS["tversky"].alpha == 0.3 and PRESETS["tversky"].beta == 0.7
        assert PRESETS["focal_tversky"].gamma == pytest.approx(4.0 / 3.0)
        assert PRESETS["combo"].alpha == 0.5 and PRESETS["combo"].beta == 0.5
        for name in ("unified_focal_sym", "unified_focal_asym"):
            spec = PRESETS[name]
            assert spec.lam == 0.5 and spec.delta == 0.6 and spec.gamma == 0.5
        assert len(PRESETS) == 8

    def test_presets_json_parses_and_validates(self):
        registry = json.loads(losses.presets_json())
        assert set(registry) == set(PRESETS)
        for obj in registry.values():
            spec_from_json(obj)


class TestPerImageValues:
    @pytest.mark.parametrize("fam", FAMILIES)
    def test_matches_per_slice_evaluation(self, fam):
        rng = np.random.default_rng(hash(fam) % 2**32)
        spec = validate_spec(LossSpec(fam))
        z, y = rand_pair(rng, (4, 5, 5, 3))
        vec = losses.per_image_values(spec, z, y)
        ref = np.array([loss_value(spec, z[i : i + 1], y[i : i + 1]) for i in range(4)])
        assert np.abs(vec - ref).max() < 1e-12
