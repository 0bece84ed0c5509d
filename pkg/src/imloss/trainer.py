"""Tiny fully-convolutional segmentation model with hand-rolled passes.

Three layers (3x3 conv -> ReLU, 3x3 conv -> ReLU, 1x1 conv), all
same-padded, trained with plain SGD under a reduce-on-plateau schedule
and early stopping.  Forward/backward are written as im2col matmuls; the
model runs in float32 while losses and their gradients are evaluated in
float64.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import losses as losses_mod
from . import metrics as metrics_mod
from . import segt
from .losses import LossSpec, spec_from_json, spec_to_json, validate_spec
from .numerics import NumericsError, clip_probs, softmax
from .synth import SplitDataset

HIDDEN = 8
KERNEL = 3

# "improvement" means a decrease of more than this, absolute
MIN_DELTA = 1e-6


class TrainerError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """Raised when training hits a non-finite loss."""

    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


@dataclass
class TinySegNet:
    w1: np.ndarray  # (3, 3, 1, 8)
    b1: np.ndarray
    w2: np.ndarray  # (3, 3, 8, 8)
    b2: np.ndarray
    w3: np.ndarray  # (8, C)
    b3: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.w3.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "w3": self.w3, "b3": self.b3}

    def copy(self) -> "TinySegNet":
        return TinySegNet(**{k: v.copy() for k, v in self.params().items()})

    def param_count(self) -> int:
        return sum(int(v.size) for v in self.params().values())


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_xavier(num_classes: int, seed: int, dtype=np.float32) -> TinySegNet:
    """Uniform Xavier weights (fan counts include the kernel area), zero biases."""
    if num_classes < 2:
        raise TrainerError(f"num_classes must be >= 2, got {num_classes}")
    rng = np.random.default_rng(seed)

    def draw(shape, fan_in, fan_out):
        bound = xavier_bound(fan_in, fan_out)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    k2 = KERNEL * KERNEL
    return TinySegNet(
        w1=draw((KERNEL, KERNEL, 1, HIDDEN), k2 * 1, k2 * HIDDEN),
        b1=np.zeros(HIDDEN, dtype=dtype),
        w2=draw((KERNEL, KERNEL, HIDDEN, HIDDEN), k2 * HIDDEN, k2 * HIDDEN),
        b2=np.zeros(HIDDEN, dtype=dtype),
        w3=draw((HIDDEN, num_classes), HIDDEN, num_classes),
        b3=np.zeros(num_classes, dtype=dtype),
    )


def _patches(x: np.ndarray) -> np.ndarray:
    """Same-padded 3x3 im2col: (B,H,W,C) -> (B,H,W,9*C)."""
    b, h, w, c = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(padded, (KERNEL, KERNEL), axis=(1, 2))  # (B,H,W,C,3,3)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b, h, w, KERNEL * KERNEL * c)


def _fold_patches(dpatches: np.ndarray, channels: int) -> np.ndarray:
    """Adjoint of `_patches`: scatter-add (B,H,W,9*C) back to (B,H,W,C)."""
    b, h, w, _ = dpatches.shape
    dp = dpatches.reshape(b, h, w, KERNEL, KERNEL, channels)
    out = np.zeros((b, h + 2, w + 2, channels), dtype=dpatches.dtype)
    for ki in range(KERNEL):
        for kj in range(KERNEL):
            out[:, ki : ki + h, kj : kj + w, :] += dp[:, :, :, ki, kj, :]
    return out[:, 1 : h + 1, 1 : w + 1, :]


def _conv_input_grad(dout: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Input gradient of a same-padded conv: correlate ``dout`` with the
    spatially flipped, channel-transposed kernel (equivalent to folding
    ``dout @ W.T`` patches, but one im2col + matmul instead of 9 scatters).
    """
    flipped = weight[::-1, ::-1].transpose(0, 1, 3, 2)  # (K,K,cout,cin)
    cout = weight.shape[3]
    return _patches(dout) @ flipped.reshape(KERNEL * KERNEL * cout, -1)


def forward(net: TinySegNet, images: np.ndarray, want_cache: bool = False):
    """Logits for a batch (B,H,W,1); optionally the caches backward needs."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[-1] != 1:
        raise TrainerError(f"images must be (B,H,W,1), got {images.shape}")
    x = images.astype(net.w1.dtype, copy=False)
    p1 = _patches(x)
    pre1 = p1 @ net.w1.reshape(-1, HIDDEN) + net.b1
    h1 = np.maximum(pre1, 0.0)
    p2 = _patches(h1)
    pre2 = p2 @ net.w2.reshape(-1, HIDDEN) + net.b2
    h2 = np.maximum(pre2, 0.0)
    logits = h2 @ net.w3 + net.b3
    if want_cache:
        return logits, (p1, pre1, p2, pre2, h2)
    return logits


def backward(net: TinySegNet, images: np.ndarray, truth: np.ndarray, spec: LossSpec):
    """Loss value and parameter gradients for one batch (chain rule end to end).

    The loss runs in the model dtype (float32 on the training path).
    """
    logits, (p1, pre1, p2, pre2, h2) = forward(net, images, want_cache=True)
    out = losses_mod.evaluate(spec, logits, truth)
    dz = out.grad_logits.astype(net.w3.dtype, copy=False)

    b, h, w, c = dz.shape
    flat_dz = dz.reshape(-1, c)
    gw3 = h2.reshape(-1, HIDDEN).T @ flat_dz
    gb3 = flat_dz.sum(axis=0)
    dh2 = dz @ net.w3.T

    dpre2 = dh2 * (pre2 > 0)
    flat2 = dpre2.reshape(-1, HIDDEN)
    gw2 = (p2.reshape(-1, KERNEL * KERNEL * HIDDEN).T @ flat2).reshape(net.w2.shape)
    gb2 = flat2.sum(axis=0)
    dh1 = _conv_input_grad(dpre2, net.w2)

    dpre1 = dh1 * (pre1 > 0)
    flat1 = dpre1.reshape(-1, HIDDEN)
    gw1 = (p1.reshape(-1, KERNEL * KERNEL).T @ flat1).reshape(net.w1.shape)
    gb1 = flat1.sum(axis=0)

    grads = {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2, "w3": gw3, "b3": gb3}
    return out.value, grads


@dataclass(frozen=True)
class TrainConfig:
    loss: LossSpec
    learning_rate: float = 0.1
    batch_size: int = 2
    plateau_factor: float = 0.1
    plateau_patience: int = 10
    early_stop_patience: int = 20
    max_epochs: int = 200
    seed: int = 0


def validate_train_config(config: TrainConfig) -> TrainConfig:
    if config.learning_rate <= 0 or config.batch_size < 1 or config.max_epochs < 1:
        raise TrainerError("learning_rate, batch_size and max_epochs must be positive")
    if not 0 < config.plateau_factor < 1:
        raise TrainerError(f"plateau_factor must lie in (0, 1), got {config.plateau_factor}")
    if config.plateau_patience < 1 or config.early_stop_patience < 1:
        raise TrainerError("patiences must be positive")
    if config.plateau_patience >= config.early_stop_patience:
        raise TrainerError("plateau_patience must be smaller than early_stop_patience")
    validate_spec(config.loss)
    return config


def train_config_from_json(text: str | dict) -> TrainConfig:
    obj = json.loads(text) if isinstance(text, str) else dict(text)
    if "loss" not in obj:
        raise TrainerError("train config needs a 'loss' spec")
    loss = obj.pop("loss")
    spec = spec_from_json(loss) if isinstance(loss, (str, dict)) else loss
    try:
        config = TrainConfig(loss=spec, **obj)
    except TypeError as exc:
        raise TrainerError(f"bad train config: {exc}") from None
    return validate_train_config(config)


def train_config_to_json(config: TrainConfig) -> str:
    obj = {
        "loss": json.loads(spec_to_json(config.loss)),
        "learning_rate": config.learning_rate,
        "batch_size": config.batch_size,
        "plateau_factor": config.plateau_factor,
        "plateau_patience": config.plateau_patience,
        "early_stop_patience": config.early_stop_patience,
        "max_epochs": config.max_epochs,
        "seed": config.seed,
    }
    return json.dumps(obj, indent=2, sort_keys=True)


@dataclass
class EpochStats:
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainReport:
    epochs: list[EpochStats]
    best_epoch: int  # index into epochs
    best_val_loss: float
    test_metrics: dict[str, np.ndarray]  # metric -> (n_test, C) per-image values
    test_means: dict[str, np.ndarray]  # metric -> (C,) means over test images
    wall_seconds: float
    diverged: str | None = None
    net: "TinySegNet | None" = None  # best-epoch parameters (not serialized)

    def to_json(self) -> str:
        obj = {
            "epochs": [
                {"train_loss": e.train_loss, "val_loss": e.val_loss, "lr": e.lr}
                for e in self.epochs
            ],
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "test_metrics": {k: v.tolist() for k, v in self.test_metrics.items()},
            "test_means": {k: v.tolist() for k, v in self.test_means.items()},
            "wall_seconds": self.wall_seconds,
            "diverged": self.diverged,
        }
        return json.dumps(obj, indent=2, sort_keys=True)

    def write_epochs_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(("epoch", "train_loss", "val_loss", "lr"))
            for i, e in enumerate(self.epochs):
                writer.writerow((i, f"{e.train_loss:.8f}", f"{e.val_loss:.8f}", f"{e.lr:.8f}"))


def _per_image_losses(net: TinySegNet, images: np.ndarray, masks: np.ndarray,
                      spec: LossSpec) -> np.ndarray:
    """Per-image loss values, float64."""
    logits = forward(net, images).astype(np.float64)
    return losses_mod.per_image_values(spec, logits, masks)


def _test_metrics(net: TinySegNet, images: np.ndarray, masks: np.ndarray):
    logits = forward(net, images)
    pred = metrics_mod.argmax_mask(logits)
    n, c = images.shape[0], masks.shape[-1]
    per = {m: np.empty((n, c)) for m in ("dsc", "iou", "precision", "recall")}
    for i in range(n):
        seg = metrics_mod.compute_metrics(metrics_mod.confusion(pred[i], masks[i]))
        per["dsc"][i] = seg.dsc
        per["iou"][i] = seg.iou
        per["precision"][i] = seg.precision
        per["recall"][i] = seg.recall
    means = {m: v.mean(axis=0) for m, v in per.items()}
    return per, means


def train(config: TrainConfig, data: SplitDataset) -> TrainReport:
    """SGD training under the plateau/early-stop protocol.

    The model with the lowest validation loss is kept and evaluated on
    the test split.  Deterministic for a fixed (config, data) on one
    build; only ``wall_seconds`` varies between runs.
    """
    config = validate_train_config(config)
    for part, name in zip(data, ("train", "val", "test")):
        if len(part) == 0:
            raise TrainerError(f"{name} split is empty")
    t_start = time.perf_counter()
    num_classes = data.train.masks.shape[-1]
    net = init_xavier(num_classes, config.seed)
    shuffle_rng = np.random.default_rng([config.seed, 7])

    lr = config.learning_rate
    best_val = np.inf
    best_epoch = -1
    best_net = net.copy()
    bad_early = 0
    bad_plateau = 0
    epochs: list[EpochStats] = []
    diverged: str | None = None

    n_train = len(data.train)
    for epoch in range(config.max_epochs):
        perm = shuffle_rng.permutation(n_train)
        total = 0.0
        for start in range(0, n_train, config.batch_size):
            idx = perm[start : start + config.batch_size]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    value, grads = backward(net, data.train.images[idx],
                                            data.train.masks[idx], config.loss)
            except NumericsError:
                # exploded parameters produce non-finite logits
                value = np.nan
            if not np.isfinite(value):
                diverged = f"non-finite training loss at epoch {epoch}"
                break
            total += value * len(idx)
            for key, grad in grads.items():
                param = getattr(net, key)
                param -= (lr * grad).astype(param.dtype)
        if diverged:
            break
        train_loss = total / n_train
        val_loss = float(_per_image_losses(net, data.val.images, data.val.masks,
                                           config.loss).mean())
        epochs.append(EpochStats(train_loss=train_loss, val_loss=val_loss, lr=lr))
        if not np.isfinite(val_loss):
            diverged = f"non-finite validation loss at epoch {epoch}"
            break
        if val_loss < best_val - MIN_DELTA:
            best_val = val_loss
            best_epoch = epoch
            best_net = net.copy()
            bad_early = 0
            bad_plateau = 0
        else:
            bad_early += 1
            bad_plateau += 1
            if bad_early >= config.early_stop_patience:
                break
            if bad_plateau >= config.plateau_patience:
                lr *= config.plateau_factor
                bad_plateau = 0

    if best_epoch < 0:
        report = TrainReport(
            epochs=epochs, best_epoch=-1, best_val_loss=float("nan"),
            test_metrics={}, test_means={},
            wall_seconds=time.perf_counter() - t_start, diverged=diverged or "no finite epoch",
        )
        raise DivergenceError(report.diverged, report)

    per, means = _test_metrics(best_net, data.test.images, data.test.masks)
    report = TrainReport(
        epochs=epochs,
        best_epoch=best_epoch,
        best_val_loss=best_val,
        test_metrics=per,
        test_means=means,
        wall_seconds=time.perf_counter() - t_start,
        diverged=diverged,
        net=best_net,
    )
    if diverged:
        raise DivergenceError(diverged, report)
    return report


def save_checkpoint(out_dir: str | os.PathLike, net: TinySegNet) -> None:
    """Parameter bundle: one SEGT file per tensor plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"params": {}, "num_classes": net.num_classes}
    for name, value in net.params().items():
        fname = f"{name}.segt"
        segt.write(out / fname, value.astype(np.float32))
        manifest["params"][name] = {"file": fname, "shape": list(value.shape)}
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, out / "manifest.json")


def load_checkpoint(in_dir: str | os.PathLike) -> TinySegNet:
    out = Path(in_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    params = {
        name: segt.read(out / entry["file"])
        for name, entry in manifest["params"].items()
    }
    return TinySegNet(**params)
