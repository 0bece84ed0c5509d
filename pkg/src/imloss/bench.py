"""Experiment runner: a loss x scene x seed grid with summary statistics.

Each cell generates its own dataset (scene preset reseeded per cell
seed), trains independently, and contributes per-image test metrics.
Per-image values pooled across seeds are the unit of statistical
analysis; diverged cells are excluded with a warning rather than
imputed.  Re-running a grid reproduces every output file byte for byte.
"""

from __future__ import annotations

import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from . import synth
from .losses import PRESETS, LossSpec, spec_from_json, spec_to_json, validate_spec
from .trainer import DivergenceError, TrainConfig, train, train_config_from_json
from .synth import SceneConfig

METRICS = ("dsc", "iou", "precision", "recall")


class BenchError(ValueError):
    pass


@dataclass(frozen=True)
class BenchmarkGrid:
    scenes: tuple[tuple[str, SceneConfig], ...]  # (name, config) pairs
    losses: tuple[tuple[str, LossSpec], ...]  # (name, spec) pairs
    seeds: tuple[int, ...]
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(loss=PRESETS["dice"])
    )


def make_grid(scenes, losses, seeds, train: TrainConfig | None = None) -> BenchmarkGrid:
    """Resolve scene/loss names to configs and validate uniqueness."""
    scene_pairs = []
    for entry in scenes:
        if isinstance(entry, str):
            scene_pairs.append((entry, synth.scene_config(entry)))
        elif isinstance(entry, dict):
            name = entry.pop("name", None)
            cfg = synth.scene_config(entry)
            scene_pairs.append((name or f"scene{len(scene_pairs)}", cfg))
        else:
            name, cfg = entry
            scene_pairs.append((name, synth.scene_config(cfg)))
    loss_pairs = []
    for entry in losses:
        if isinstance(entry, str):
            if entry not in PRESETS:
                raise BenchError(
                    f"unknown loss preset {entry!r}; available: {', '.join(PRESETS)}"
                )
            loss_pairs.append((entry, PRESETS[entry]))
        elif isinstance(entry, dict):
            name = entry.pop("name", None)
            spec = spec_from_json(entry.pop("spec")) if "spec" in entry else spec_from_json(entry)
            loss_pairs.append((name or spec.family, spec))
        else:
            name, spec = entry
            loss_pairs.append((name, validate_spec(spec)))
    seeds = tuple(int(s) for s in seeds)
    if not scene_pairs or not loss_pairs or not seeds:
        raise BenchError("scenes, losses and seeds must all be nonempty")
    names = [n for n, _ in loss_pairs]
    if len(set(names)) != len(names):
        raise BenchError(f"duplicate loss names in grid: {names}")
    snames = [n for n, _ in scene_pairs]
    if len(set(snames)) != len(snames):
        raise BenchError(f"duplicate scene names in grid: {snames}")
    if len(set(seeds)) != len(seeds):
        raise BenchError(f"duplicate seeds in grid: {seeds}")
    return BenchmarkGrid(
        scenes=tuple(scene_pairs),
        losses=tuple(loss_pairs),
        seeds=seeds,
        train=train or TrainConfig(loss=PRESETS["dice"]),
    )


def grid_from_json(text: str | dict) -> BenchmarkGrid:
    obj = json.loads(text) if isinstance(text, str) else dict(text)
    for key in obj:
        if key not in ("scenes", "losses", "seeds", "train"):
            raise BenchError(f"unknown field {key!r} in bench grid")
    for key in ("scenes", "losses", "seeds"):
        if key not in obj:
            raise BenchError(f"bench grid is missing {key!r}")
    train = None
    if "train" in obj:
        spec = obj["train"]
        spec.setdefault("loss", {"family": "Dice"})
        train = train_config_from_json(spec)
    return make_grid(obj["scenes"], obj["losses"], obj["seeds"], train)


@dataclass
class CellResult:
    scene: str
    loss: str
    seed: int
    per_image: dict[str, np.ndarray] | None  # metric -> (n_images, C)
    failure: str | None = None


@dataclass
class ResultTable:
    grid: BenchmarkGrid
    cells: list[CellResult]
    incomplete: bool = False  # set when a run was cancelled mid-grid

    def _ok_cells(self, scene: str, loss: str) -> list[CellResult]:
        return [
            c
            for c in self.cells
            if c.scene == scene and c.loss == loss and c.failure is None
        ]

    def pooled(self, scene: str, loss: str, metric: str, cls: int) -> np.ndarray:
        """Per-image metric values pooled across seeds."""
        cells = self._ok_cells(scene, loss)
        if not cells:
            return np.empty(0)
        return np.concatenate([c.per_image[metric][:, cls] for c in cells])

    def num_classes(self, scene: str) -> int:
        for name, cfg in self.grid.scenes:
            if name == scene:
                return cfg.num_classes
        raise BenchError(f"unknown scene {scene!r}")

    def results_rows(self):
        """Per (scene, loss, seed, class): metric means over test images."""
        rows = []
        for c in self.cells:
            if c.failure is not None:
                continue
            for cls in range(c.per_image["dsc"].shape[1]):
                rows.append(
                    (c.scene, c.loss, c.seed, cls)
                    + tuple(float(c.per_image[m][:, cls].mean()) for m in METRICS)
                )
        return rows

    def summary_rows(self):
        """Per (scene, loss, class, metric): mean/CI over pooled per-image values."""
        rows = []
        for scene, _ in self.grid.scenes:
            for loss, _ in self.grid.losses:
                n_seeds = len(self._ok_cells(scene, loss))
                if n_seeds == 0:
                    continue
                for cls in range(self.num_classes(scene)):
                    for metric in METRICS:
                        vals = self.pooled(scene, loss, metric, cls)
                        mean, ci = metrics_mod.mean_ci(vals)
                        rows.append((scene, loss, cls, metric, mean, ci, n_seeds))
        return rows

    def pvalue_rows(self):
        """Pairwise two-sided rank-sum p-values on pooled per-image DSC."""
        rows = []
        for scene, _ in self.grid.scenes:
            for cls in range(1, self.num_classes(scene)):
                for la, _ in self.grid.losses:
                    a = self.pooled(scene, la, "dsc", cls)
                    for lb, _ in self.grid.losses:
                        b = self.pooled(scene, lb, "dsc", cls)
                        if a.size == 0 or b.size == 0:
                            continue
                        p = metrics_mod.wilcoxon_rank_sum(a, b)
                        rows.append((scene, cls, la, lb, p))
        return rows

    def failures(self):
        return [
            {"scene": c.scene, "loss": c.loss, "seed": c.seed, "reason": c.failure}
            for c in self.cells
            if c.failure is not None
        ]

    def render_report(self) -> str:
        """Markdown tables: one per (scene, foreground class), best per metric bold."""
        lines = ["# Benchmark report", ""]
        for scene, _ in self.grid.scenes:
            for cls in range(1, self.num_classes(scene)):
                lines.append(f"## Scene `{scene}`, class {cls}")
                lines.append("")
                lines.append("| Loss | DSC | IoU | Precision | Recall |")
                lines.append("|---|---|---|---|---|")
                stats: dict[str, dict[str, tuple[float, float]]] = {}
                for loss, _ in self.grid.losses:
                    if not self._ok_cells(scene, loss):
                        continue
                    stats[loss] = {
                        m: metrics_mod.mean_ci(self.pooled(scene, loss, m, cls))
                        for m in METRICS
                    }
                if not stats:
                    lines.append("| (all cells failed) | | | | |")
                    lines.append("")
                    continue
                best = {
                    m: max(stats[loss][m][0] for loss in stats) for m in METRICS
                }
                for loss in stats:
                    cells = []
                    for m in METRICS:
                        mean, ci = stats[loss][m]
                        text = f"{mean:.3f}±{ci:.3f}"
                        if mean == best[m]:
                            text = f"**{text}**"
                        cells.append(text)
                    lines.append(f"| {loss} | " + " | ".join(cells) + " |")
                lines.append("")
        failures = self.failures()
        if failures:
            lines.append("## Failed cells")
            lines.append("")
            for f in failures:
                lines.append(f"- {f['scene']}/{f['loss']}/seed {f['seed']}: {f['reason']}")
            lines.append("")
        return "\n".join(lines)

    def write_outputs(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "results.csv", "w", newline="") as f:
            f.write("scene,loss,seed,class,dsc,iou,precision,recall\n")
            for row in self.results_rows():
                scene, loss, seed, cls, *vals = row
                f.write(
                    f"{scene},{loss},{seed},{cls},"
                    + ",".join(f"{v:.6f}" for v in vals)
                    + "\n"
                )
        with open(out / "summary.csv", "w", newline="") as f:
            f.write("scene,loss,class,metric,mean,ci_halfwidth,n\n")
            for scene, loss, cls, metric, mean, ci, n in self.summary_rows():
                f.write(f"{scene},{loss},{cls},{metric},{mean:.6f},{ci:.6f},{n}\n")
        with open(out / "pvalues.csv", "w", newline="") as f:
            f.write("scene,class,loss_a,loss_b,p_dsc\n")
            for scene, cls, la, lb, p in self.pvalue_rows():
                f.write(f"{scene},{cls},{la},{lb},{p:.6g}\n")
        (out / "report.md").write_text(self.render_report())


def _run_cell(args):
    scene_name, loss_name, seed, spec, data, train_cfg = args
    cfg = replace(train_cfg, loss=spec, seed=seed)
    try:
        report = train(cfg, data)
        return CellResult(scene_name, loss_name, seed, report.test_metrics)
    except DivergenceError as exc:
        return CellResult(scene_name, loss_name, seed, None, failure=str(exc))


def run_grid(grid: BenchmarkGrid, workers: int = 1, log=None) -> ResultTable:
    """Train every (scene, loss, seed) cell; deterministic given the grid."""
    datasets: dict[tuple[str, int], synth.SplitDataset] = {}
    for scene_name, scene_cfg in grid.scenes:
        for seed in grid.seeds:
            data = synth.generate(replace(scene_cfg, seed=seed))
            datasets[(scene_name, seed)] = synth.split(data)

    jobs = [
        (scene_name, loss_name, seed, spec, datasets[(scene_name, seed)], grid.train)
        for scene_name, _ in grid.scenes
        for loss_name, spec in grid.losses
        for seed in grid.seeds
    ]
    cells: list[CellResult] = []
    incomplete = False
    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_run_cell, job) for job in jobs]
                for fut in futures:
                    cells.append(fut.result())
        else:
            for job in jobs:
                cells.append(_run_cell(job))
                if log:
                    c = cells[-1]
                    log(f"cell {c.scene}/{c.loss}/seed {c.seed}: {c.failure or 'ok'}")
    except KeyboardInterrupt:
        incomplete = True
    for cell in cells:
        if cell.failure is not None:
            print(
                f"warning: cell {cell.scene}/{cell.loss}/seed {cell.seed} failed: "
                f"{cell.failure}",
                file=sys.stderr,
            )
    return ResultTable(grid=grid, cells=cells, incomplete=incomplete)


def gamma_sweep(
    scene,
    variant: str,
    gammas,
    seeds,
    train_cfg: TrainConfig | None = None,
    workers: int = 1,
):
    """Unified Focal DSC vs gamma; returns (curve rows, ResultTable).

    Curve rows are (variant, gamma, mean foreground DSC, ci, n_values),
    pooled over foreground classes and seeds.
    """
    variants = ("sym", "asym") if variant == "both" else (variant,)
    for v in variants:
        if v not in ("sym", "asym"):
            raise BenchError(f"variant must be 'sym', 'asym' or 'both', got {variant!r}")
    gammas = tuple(float(g) for g in gammas)
    for g in gammas:
        if not 0.0 <= g < 1.0:
            raise BenchError(f"gamma values must lie in [0, 1), got {g}")
    losses = []
    for v in variants:
        family = "UnifiedFocalSym" if v == "sym" else "UnifiedFocalAsym"
        for g in gammas:
            losses.append(
                (f"uf_{v}_g{g:g}", validate_spec(LossSpec(family, lam=0.5, delta=0.6, gamma=g)))
            )
    grid = make_grid([scene] if isinstance(scene, str) else [scene], losses, seeds, train_cfg)
    table = run_grid(grid, workers=workers)
    scene_name = grid.scenes[0][0]
    num_classes = grid.scenes[0][1].num_classes
    curve = []
    for v in variants:
        for g in gammas:
            name = f"uf_{v}_g{g:g}"
            vals = np.concatenate(
                [table.pooled(scene_name, name, "dsc", cls) for cls in range(1, num_classes)]
            )
            if vals.size == 0:
                continue
            mean, ci = metrics_mod.mean_ci(vals)
            curve.append((v, g, mean, ci, int(vals.size)))
    return curve, table


def write_sweep_csv(path, curve) -> None:
    with open(path, "w", newline="") as f:
        f.write("variant,gamma,mean_dsc,ci_halfwidth,n\n")
        for v, g, mean, ci, n in curve:
            f.write(f"{v},{g:g},{mean:.6f},{ci:.6f},{n}\n")
