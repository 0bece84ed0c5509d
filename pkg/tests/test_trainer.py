import numpy as np
import pytest

from imloss import synth, trainer
from imloss.losses import PRESETS, LossSpec, loss_value, validate_spec
from imloss.numerics import one_hot, softmax
from imloss.trainer import (
    DivergenceError,
    TinySegNet,
    TrainConfig,
    TrainerError,
    backward,
    forward,
    init_xavier,
    train,
    train_config_from_json,
    validate_train_config,
)


def tiny_splits(fraction=0.25, count=24, hw=16, sigma=0.1, seed=0):
    cfg = synth.SceneConfig(hw, hw, 2, (fraction,), noise_sigma=sigma, count=count, seed=seed)
    return synth.split(synth.generate(cfg))


class TestInit:
    def test_param_count(self):
        net = init_xavier(3, seed=0)
        assert net.param_count() == (9 * 1 * 8 + 8) + (9 * 8 * 8 + 8) + (8 * 3 + 3)

    def test_xavier_bounds(self):
        net = init_xavier(2, seed=0)
        # fan_in = k*k*c_in, fan_out = k*k*c_out
        b1 = np.sqrt(6.0 / (9 * 1 + 9 * 8))
        assert b1 == pytest.approx(0.2721655269759087, abs=1e-15)
        assert np.abs(net.w1).max() <= b1
        assert np.abs(net.w2).max() <= np.sqrt(6.0 / (72 + 72))
        assert np.abs(net.w3).max() <= np.sqrt(6.0 / (8 + 2))

    def test_biases_zero(self):
        net = init_xavier(2, seed=1)
        assert not net.b1.any() and not net.b2.any() and not net.b3.any()

    def test_deterministic(self):
        a, b = init_xavier(2, seed=7), init_xavier(2, seed=7)
        for k in a.params():
            assert np.array_equal(a.params()[k], b.params()[k])


class TestForward:
    def test_zero_net_uniform_softmax(self):
        net = init_xavier(2, seed=0)
        for k, v in net.params().items():
            v[...] = 0.0
        logits = forward(net, np.random.default_rng(0).random((2, 5, 5, 1), dtype=np.float32))
        assert np.all(logits == 0.0)
        assert np.allclose(softmax(logits.astype(np.float64)), 0.5)

    def test_identity_passthrough_head(self):
        net = init_xavier(2, seed=0)
        rng = np.random.default_rng(1)
        x = rng.random((1, 6, 6, 1), dtype=np.float32)
        _, (p1, pre1, p2, pre2, h2) = forward(net, x, want_cache=True)
        net.w3[...] = 0.0
        net.w3[0, 0] = 1.0  # logits class 0 = feature channel 0
        net.b3[...] = 0.0
        logits = forward(net, x)
        assert np.allclose(logits[..., 0], h2[..., 0], atol=1e-7)
        assert np.all(logits[..., 1] == 0.0)

    def test_conv_against_hand_loop(self):
        net = init_xavier(2, seed=3, dtype=np.float64)
        rng = np.random.default_rng(2)
        x = rng.random((1, 4, 4, 1))
        _, (p1, pre1, _, _, _) = forward(net, x, want_cache=True)
        padded = np.pad(x[0, :, :, 0], 1)
        for i in range(4):
            for j in range(4):
                for c in range(8):
                    acc = net.b1[c]
                    for ki in range(3):
                        for kj in range(3):
                            acc += padded[i + ki, j + kj] * net.w1[ki, kj, 0, c]
                    assert pre1[0, i, j, c] == pytest.approx(acc, abs=1e-12)

    def test_shape_validation(self):
        net = init_xavier(2, seed=0)
        with pytest.raises(TrainerError, match="images"):
            forward(net, np.zeros((2, 5, 5)))


class TestBackward:
    @pytest.mark.parametrize("name", ["ce", "tversky", "combo", "unified_focal_sym"])
    def test_composite_gradcheck(self, name):
        spec = PRESETS[name]
        net = init_xavier(2, seed=0, dtype=np.float64)
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 1, size=(1, 8, 8, 1))
        truth = one_hot(rng.integers(0, 2, size=(1, 8, 8)), 2)
        _, grads = backward(net, x, truth, spec)
        h = 1e-5
        for key, grad in grads.items():
            param = getattr(net, key)
            flat = param.reshape(-1)
            fd = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                hi = loss_value(spec, forward(net, x), truth)
                flat[i] = orig - h
                lo = loss_value(spec, forward(net, x), truth)
                flat[i] = orig
                fd[i] = (hi - lo) / (2 * h)
            rel = np.abs(grad.reshape(-1) - fd) / np.maximum(
                1e-8, np.maximum(np.abs(grad.reshape(-1)), np.abs(fd))
            )
            assert rel.max() < 1e-3, f"{name}/{key}: {rel.max():.2e}"

    def test_zero_gradient_at_confident_fit(self):
        net = init_xavier(2, seed=0, dtype=np.float64)
        rng = np.random.default_rng(1)
        truth = one_hot(rng.integers(0, 2, size=(1, 6, 6)), 2)
        # bypass the conv stack: drive the head so logits are huge and correct
        x = truth[..., 1:2].astype(np.float64)
        for k, v in net.params().items():
            v[...] = 0.0
        net.w1[1, 1, 0, 0] = 1.0
        net.w2[1, 1, 0, 0] = 1.0
        net.w3[0, 0] = -80.0
        net.w3[0, 1] = 80.0
        net.b3[0] = 40.0
        net.b3[1] = -40.0
        value, grads = backward(net, x, truth, PRESETS["dice"])
        assert value <= 1e-6
        for grad in grads.values():
            assert np.abs(grad).max() <= 1e-6

    def test_gradients_deterministic(self):
        net = init_xavier(2, seed=5)
        rng = np.random.default_rng(3)
        x = rng.random((2, 8, 8, 1), dtype=np.float32)
        truth = one_hot(rng.integers(0, 2, size=(2, 8, 8)), 2)
        _, g1 = backward(net, x, truth, PRESETS["dice"])
        _, g2 = backward(net, x, truth, PRESETS["dice"])
        for k in g1:
            assert np.array_equal(g1[k], g2[k])


class TestTrainConfig:
    def test_json_round_trip(self):
        cfg = TrainConfig(loss=PRESETS["tversky"], seed=3, max_epochs=7)
        back = train_config_from_json(trainer.train_config_to_json(cfg))
        assert back == cfg

    def test_validation(self):
        with pytest.raises(TrainerError, match="plateau_patience"):
            validate_train_config(
                TrainConfig(loss=PRESETS["ce"], plateau_patience=20, early_stop_patience=20)
            )
        with pytest.raises(TrainerError, match="positive"):
            validate_train_config(TrainConfig(loss=PRESETS["ce"], learning_rate=0.0))

    def test_unknown_key(self):
        with pytest.raises(TrainerError, match="bad train config"):
            train_config_from_json('{"loss": {"family": "CE"}, "momentum": 0.9}')


class TestTrainLoop:
    def test_easy_scene_convergence(self):
        # fraction 0.25, noise 0.15: DSC >= 0.85 within 200 epochs
        splits = tiny_splits(fraction=0.25, count=40, hw=32, sigma=0.15, seed=0)
        cfg = TrainConfig(loss=PRESETS["dice"], max_epochs=200, seed=0)
        report = train(cfg, splits)
        assert report.test_means["dsc"][1] >= 0.85

    def test_lr_schedule_contract(self):
        splits = tiny_splits(count=18, hw=12, sigma=0.3, seed=1)
        cfg = TrainConfig(loss=PRESETS["ce"], max_epochs=60, seed=1)
        report = train(cfg, splits)
        lrs = [e.lr for e in report.epochs]
        for prev, cur in zip(lrs, lrs[1:]):
            assert cur <= prev
            assert cur == prev or cur == pytest.approx(prev * 0.1)

    def test_best_epoch_has_minimal_val_loss(self):
        splits = tiny_splits(count=18, hw=12, seed=2)
        cfg = TrainConfig(loss=PRESETS["combo"], max_epochs=25, seed=2)
        report = train(cfg, splits)
        vals = [e.val_loss for e in report.epochs]
        assert report.best_val_loss == min(vals)
        assert vals[report.best_epoch] == min(vals)

    def test_runs_to_max_epochs_when_improving(self):
        splits = tiny_splits(count=24, hw=16, seed=0)
        cfg = TrainConfig(loss=PRESETS["dice"], max_epochs=8, seed=0)
        report = train(cfg, splits)
        assert len(report.epochs) == 8

    def test_early_stop_engages(self):
        # plateau quickly: tiny lr makes improvements < min_delta
        splits = tiny_splits(count=18, hw=12, sigma=0.4, seed=3)
        cfg = TrainConfig(loss=PRESETS["ce"], learning_rate=1e-12, max_epochs=200, seed=3)
        report = train(cfg, splits)
        assert len(report.epochs) == 1 + cfg.early_stop_patience

    def test_determinism(self):
        splits = tiny_splits(count=20, hw=12, seed=4)
        cfg = TrainConfig(loss=PRESETS["tversky"], max_epochs=10, seed=4)
        a = train(cfg, splits)
        b = train(cfg, splits)
        assert [e.train_loss for e in a.epochs] == [e.train_loss for e in b.epochs]
        assert [e.val_loss for e in a.epochs] == [e.val_loss for e in b.epochs]
        assert a.best_epoch == b.best_epoch
        for m in a.test_metrics:
            assert np.array_equal(a.test_metrics[m], b.test_metrics[m])

    def test_divergence_aborts_with_partial_report(self):
        splits = tiny_splits(count=18, hw=12, seed=5)
        cfg = TrainConfig(loss=PRESETS["ce"], learning_rate=1e18, max_epochs=30, seed=5)
        with pytest.raises(DivergenceError) as err:
            train(cfg, splits)
        assert "non-finite" in str(err.value)

    def test_empty_split_rejected(self):
        splits = tiny_splits(count=20, hw=12, seed=6)
        broken = synth.SplitDataset(splits.train, splits.val.subset(np.array([], dtype=int)),
                                    splits.test)
        with pytest.raises(TrainerError, match="val split is empty"):
            train(TrainConfig(loss=PRESETS["ce"]), broken)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = init_xavier(3, seed=9)
        trainer.save_checkpoint(tmp_path / "ckpt", net)
        back = trainer.load_checkpoint(tmp_path / "ckpt")
        for k in net.params():
            assert np.array_equal(net.params()[k], back.params()[k])
        assert back.num_classes == 3

    def test_report_artifacts(self, tmp_path):
        splits = tiny_splits(count=18, hw=12, seed=7)
        cfg = TrainConfig(loss=PRESETS["ce"], max_epochs=4, seed=7)
        report = train(cfg, splits)
        report.write_epochs_csv(tmp_path / "epochs.csv")
        lines = (tmp_path / "epochs.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,lr"
        assert len(lines) == 5
        import json

        obj = json.loads(report.to_json())
        assert obj["best_epoch"] == report.best_epoch
        assert len(obj["epochs"]) == 4
