"""Synthetic class-imbalanced segmentation scenes.

Each image contains one random ellipse or blob per foreground class,
scaled to hit a target foreground fraction, on a noisy background.
Intensities are class-dependent (background 0.2, class 1 0.7, class 2
0.5) plus Gaussian noise clipped to [0, 1].  Per-image RNG streams are
derived from (seed, image index), so generation order and parallelism
cannot change the output.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import segt
from .numerics import one_hot

CLASS_INTENSITY = (0.2, 0.7, 0.5)
PAPER_SPLIT = (0.64, 0.16, 0.2)

# fraction of the image that one blob may occupy at most
_MAX_FRACTION = 0.5
_MIN_PIXELS = 4


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    height: int
    width: int
    num_classes: int = 2
    target_foreground_fraction: tuple[float, ...] = (0.093,)
    noise_sigma: float = 0.15
    blob_kind: str = "ellipse"
    nesting: bool = False
    count: int = 100
    seed: int = 0

    def __post_init__(self):
        fractions = self.target_foreground_fraction
        if isinstance(fractions, (int, float)):
            fractions = (float(fractions),)
        object.__setattr__(self, "target_foreground_fraction", tuple(float(f) for f in fractions))


def validate_config(config: SceneConfig) -> SceneConfig:
    if config.num_classes not in (2, 3):
        raise SynthError(f"num_classes must be 2 or 3, got {config.num_classes}")
    if len(config.target_foreground_fraction) != config.num_classes - 1:
        raise SynthError(
            f"need {config.num_classes - 1} foreground fraction(s), "
            f"got {config.target_foreground_fraction}"
        )
    area = config.height * config.width
    floor = _MIN_PIXELS / area
    for f in config.target_foreground_fraction:
        if not floor <= f < _MAX_FRACTION:
            raise SynthError(
                f"fraction {f} unachievable on {config.height}x{config.width}: "
                f"must lie in [{floor:.6f}, {_MAX_FRACTION})"
            )
    if config.noise_sigma < 0:
        raise SynthError(f"noise_sigma must be >= 0, got {config.noise_sigma}")
    if config.blob_kind not in ("ellipse", "blob"):
        raise SynthError(f"blob_kind must be 'ellipse' or 'blob', got {config.blob_kind!r}")
    if config.nesting and config.num_classes != 3:
        raise SynthError("nesting requires num_classes=3")
    if config.count < 1:
        raise SynthError(f"count must be positive, got {config.count}")
    return config


@dataclass
class Dataset:
    images: np.ndarray  # (n, H, W, 1) float32
    masks: np.ndarray  # (n, H, W, C) one-hot
    config: SceneConfig
    realized_fractions: np.ndarray = field(default=None)  # per class, mean over images

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(
            images=self.images[idx],
            masks=self.masks[idx],
            config=self.config,
            realized_fractions=self.realized_fractions,
        )


class SplitDataset(NamedTuple):
    train: Dataset
    val: Dataset
    test: Dataset


def _region_mask(rng: np.random.Generator, h: int, w: int, target_px: float, kind: str,
                 center=None) -> np.ndarray:
    """Rasterize one ellipse/blob with roughly ``target_px`` pixels."""
    aspect = rng.uniform(0.6, 1.6)
    angle = rng.uniform(0.0, np.pi)
    base = np.sqrt(target_px / np.pi)
    a = base * np.sqrt(aspect)
    b = base / np.sqrt(aspect)
    if kind == "blob":
        n_modes = 3
        amps = rng.uniform(0.0, 0.18, size=n_modes)
        phases = rng.uniform(0.0, 2 * np.pi, size=n_modes)
    if center is None:
        margin_y = min(h / 2 - 1, 1.2 * max(a, b))
        margin_x = min(w / 2 - 1, 1.2 * max(a, b))
        cy = rng.uniform(margin_y, h - margin_y) if h - 2 * margin_y > 1 else h / 2
        cx = rng.uniform(margin_x, w - margin_x) if w - 2 * margin_x > 1 else w / 2
    else:
        cy, cx = center

    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy + 0.5 - cy
    dx = xx + 0.5 - cx
    cos_t, sin_t = np.cos(angle), np.sin(angle)
    u = cos_t * dx + sin_t * dy
    v = -sin_t * dx + cos_t * dy

    scale = 1.0
    mask = None
    for _ in range(6):
        r2 = (u / (a * scale)) ** 2 + (v / (b * scale)) ** 2
        if kind == "blob":
            theta = np.arctan2(v, u)
            wobble = 1.0
            for k in range(n_modes):
                wobble = wobble + amps[k] * np.cos((k + 2) * theta + phases[k])
            boundary = np.maximum(wobble, 0.4) ** 2
        else:
            boundary = 1.0
        mask = r2 <= boundary
        cnt = int(mask.sum())
        if cnt >= _MIN_PIXELS and abs(cnt - target_px) <= max(2.0, 0.1 * target_px):
            break
        scale *= np.sqrt(target_px / max(cnt, 1))
    if int(mask.sum()) < _MIN_PIXELS:
        # quantization ate the region: fall back to a 2x2 block
        iy, ix = int(np.clip(cy, 1, h - 2)), int(np.clip(cx, 1, w - 2))
        mask = np.zeros((h, w), dtype=bool)
        mask[iy - 1 : iy + 1, ix - 1 : ix + 1] = True
    return mask


def _make_labels(rng: np.random.Generator, config: SceneConfig) -> np.ndarray:
    h, w = config.height, config.width
    area = h * w
    labels = np.zeros((h, w), dtype=np.int64)
    fractions = config.target_foreground_fraction
    if config.nesting:
        organ_px = (fractions[0] + fractions[1]) * area
        organ = _region_mask(rng, h, w, organ_px, config.blob_kind)
        labels[organ] = 1
        # tumour strictly inside the organ region
        ys, xs = np.nonzero(organ)
        cy, cx = float(ys.mean()), float(xs.mean())
        jitter = rng.uniform(-1.0, 1.0, size=2)
        tumour = _region_mask(
            rng, h, w, fractions[1] * area, config.blob_kind, center=(cy + jitter[0], cx + jitter[1])
        )
        tumour &= organ
        if int(tumour.sum()) < _MIN_PIXELS or tumour.sum() == organ.sum():
            iy, ix = int(np.clip(cy, 1, h - 2)), int(np.clip(cx, 1, w - 2))
            tumour = np.zeros_like(organ)
            tumour[iy - 1 : iy + 1, ix - 1 : ix + 1] = True
            tumour &= organ
        labels[tumour] = 2
    else:
        for cls in range(1, config.num_classes):
            region = _region_mask(rng, h, w, fractions[cls - 1] * area, config.blob_kind)
            labels[region] = cls
    return labels


def generate(config: SceneConfig) -> Dataset:
    """Deterministic dataset for ``config``; same seed gives bit-identical output."""
    config = validate_config(config)
    h, w, c = config.height, config.width, config.num_classes
    images = np.empty((config.count, h, w, 1), dtype=np.float32)
    masks = np.empty((config.count, h, w, c), dtype=np.float64)
    fractions = np.zeros(c, dtype=np.float64)
    for i in range(config.count):
        rng = np.random.default_rng([config.seed, i])
        labels = _make_labels(rng, config)
        intensity = np.asarray(CLASS_INTENSITY, dtype=np.float64)[labels]
        if config.noise_sigma > 0:
            intensity = intensity + rng.normal(0.0, config.noise_sigma, size=(h, w))
        images[i, :, :, 0] = np.clip(intensity, 0.0, 1.0).astype(np.float32)
        masks[i] = one_hot(labels, c)
        fractions += masks[i].mean(axis=(0, 1))
    fractions /= config.count
    dataset = Dataset(images=images, masks=masks, config=config, realized_fractions=fractions)
    for cls in range(1, c):
        target = config.target_foreground_fraction[cls - 1]
        if abs(fractions[cls] - target) > 0.3 * target:
            raise SynthError(
                f"class {cls} realized fraction {fractions[cls]:.5f} misses target "
                f"{target:.5f} by more than 30%"
            )
    return dataset


def imbalance_stats(dataset: Dataset) -> np.ndarray:
    """Mean over images of the per-image class fraction, one entry per class."""
    if len(dataset) == 0:
        raise SynthError("dataset is empty")
    return dataset.masks.mean(axis=(1, 2)).mean(axis=0)


def _split_counts(n: int, ratios) -> list[int]:
    """Largest-remainder apportionment of n items to the given ratios."""
    exact = [n * r for r in ratios]
    counts = [int(np.floor(e)) for e in exact]
    order = np.argsort([c - e for c, e in zip(counts, exact)], kind="stable")
    for i in range(n - sum(counts)):
        counts[order[i]] += 1
    return counts


def split(dataset: Dataset, ratios=PAPER_SPLIT) -> SplitDataset:
    """Disjoint, exhaustive train/val/test split; shuffle seeded by the config."""
    if len(ratios) != 3:
        raise SynthError(f"need three ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise SynthError(f"ratios must sum to 1, got {ratios}")
    n = len(dataset)
    counts = _split_counts(n, ratios)
    if min(counts) == 0:
        raise SynthError(f"ratios {ratios} give an empty split for {n} images")
    perm = np.random.default_rng([dataset.config.seed, 10**9]).permutation(n)
    a, b = counts[0], counts[0] + counts[1]
    return SplitDataset(
        train=dataset.subset(perm[:a]),
        val=dataset.subset(perm[a:b]),
        test=dataset.subset(perm[b:]),
    )


# Imbalance tiers mirroring the benchmark datasets' foreground percentages.
PRESET_SCENES: dict[str, SceneConfig] = {
    "moderate": SceneConfig(64, 64, 2, (0.093,), count=312),
    "low": SceneConfig(64, 64, 2, (0.048,), count=150),
    "severe": SceneConfig(64, 64, 2, (0.002,), count=150),
    "nested": SceneConfig(64, 64, 3, (0.008, 0.002), nesting=True, count=150),
}


def scene_config(name_or_config) -> SceneConfig:
    if isinstance(name_or_config, SceneConfig):
        return name_or_config
    if isinstance(name_or_config, str):
        if name_or_config not in PRESET_SCENES:
            raise SynthError(
                f"unknown scene preset {name_or_config!r}; "
                f"available: {', '.join(sorted(PRESET_SCENES))}"
            )
        return PRESET_SCENES[name_or_config]
    if isinstance(name_or_config, dict):
        obj = dict(name_or_config)
        if "target_foreground_fraction" in obj and isinstance(
            obj["target_foreground_fraction"], list
        ):
            obj["target_foreground_fraction"] = tuple(obj["target_foreground_fraction"])
        try:
            return validate_config(SceneConfig(**obj))
        except TypeError as exc:
            raise SynthError(f"bad scene config: {exc}") from None
    raise SynthError(f"cannot interpret scene {name_or_config!r}")


def save_dataset(out_dir: str | os.PathLike, splits: SplitDataset) -> None:
    """Persist splits as SEGT files plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = splits.train.config
    manifest = {
        "format": segt.MAGIC,
        "config": asdict(config),
        "splits": {},
        "realized_fractions": [float(f) for f in splits.train.realized_fractions],
    }
    for name, part in zip(("train", "val", "test"), splits):
        img_file = f"{name}_images.segt"
        mask_file = f"{name}_masks.segt"
        segt.write(out / img_file, part.images)
        segt.write(out / mask_file, part.masks.astype(np.uint8))
        manifest["splits"][name] = {
            "images": img_file,
            "masks": mask_file,
            "count": len(part),
        }
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, out / "manifest.json")


def load_dataset(in_dir: str | os.PathLike) -> SplitDataset:
    out = Path(in_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    config = scene_config(manifest["config"])
    fractions = np.asarray(manifest["realized_fractions"], dtype=np.float64)
    parts = []
    for name in ("train", "val", "test"):
        entry = manifest["splits"][name]
        images = segt.read(out / entry["images"])
        masks = segt.read(out / entry["masks"]).astype(np.float64)
        parts.append(
            Dataset(images=images, masks=masks, config=config, realized_fractions=fractions)
        )
    return SplitDataset(*parts)
