"""Command-line entry point exposing every capability.

Exit codes: 0 success, 1 validation error (bad flags, bad configs,
missing files), 2 runtime failure (divergence, failed checks).  All
file outputs are written atomically and runs record provenance in
``run.json`` (config hash, seed, build version; no timestamps, so
identical invocations are idempotent).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, bench, oracle, segt, synth, trainer
from .losses import (
    FAMILIES,
    PRESETS,
    LossSpec,
    LossSpecError,
    evaluate,
    presets_json,
    spec_from_json,
    validate_spec,
    value_on_probs,
)
from .numerics import NumericsError, clip_probs, validate_one_hot, validate_probs


class CliError(Exception):
    """Validation failure: maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: D102 - argparse hook
        raise CliError(message)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def _write_run_record(out_dir, subcommand: str, config_obj, seed=None, extra=None) -> None:
    payload = json.dumps(config_obj, sort_keys=True, default=str).encode()
    record = {
        "subcommand": subcommand,
        "config_sha256": hashlib.sha256(payload).hexdigest(),
        "seed": seed,
        "version": __version__,
    }
    if extra:
        record.update(extra)
    _atomic_write(Path(out_dir) / "run.json", json.dumps(record, indent=2, sort_keys=True))


def _read_text(path) -> str:
    p = Path(path)
    if not p.exists():
        raise CliError(f"file not found: {p}")
    return p.read_text()


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip() != ""]
    except ValueError:
        raise CliError(f"{flag} expects a comma-separated integer list, got {text!r}") from None


def _parse_float_list(text: str, flag: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip() != ""]
    except ValueError:
        raise CliError(f"{flag} expects a comma-separated number list, got {text!r}") from None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_losses(args) -> int:
    print(presets_json())
    return 0


def cmd_eval(args) -> int:
    spec = spec_from_json(_read_text(args.spec))
    pred = segt.read(args.pred).astype(np.float64)
    truth = segt.read(args.truth).astype(np.float64)
    validate_one_hot(truth)
    if args.logits:
        out = evaluate(spec, pred, truth)
        value = out.value
        if args.grad:
            segt.write(args.grad, out.grad_logits)
    else:
        if args.grad:
            raise CliError("--grad requires --logits (gradients are defined on logits)")
        validate_probs(pred, tol=1e-6)
        if pred.shape != truth.shape:
            raise CliError(f"pred shape {pred.shape} != truth shape {truth.shape}")
        value = float(value_on_probs(spec, clip_probs(pred), truth))
    print(json.dumps({"family": spec.family, "value": value}))
    return 0


def cmd_gradcheck(args) -> int:
    if args.family == "all":
        families = list(FAMILIES)
    elif args.family in FAMILIES:
        families = [args.family]
    else:
        raise CliError(f"--family must be 'all' or one of {', '.join(FAMILIES)}")
    shape = tuple(_parse_int_list(args.shape, "--shape"))
    reports = {}
    failed = 0
    for family in families:
        report = oracle.run_gradcheck(
            validate_spec(LossSpec(family)),
            shape=shape,
            trials=args.trials,
            seed=args.seed,
            h=args.h,
            tol=args.tol,
        )
        reports[family] = json.loads(report.to_json())
        failed += len(report.failures)
    text = json.dumps(reports, indent=2)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _atomic_write(out / "gradcheck.json", text)
        _write_run_record(
            out,
            "gradcheck",
            {"families": families, "trials": args.trials, "tol": args.tol, "h": args.h,
             "shape": list(shape)},
            seed=args.seed,
        )
    return 0 if failed == 0 else 2


def cmd_synth(args) -> int:
    if bool(args.preset) == bool(args.config):
        raise CliError("give exactly one of --preset or --config")
    if args.preset:
        config = synth.scene_config(args.preset)
    else:
        config = synth.scene_config(json.loads(_read_text(args.config)))
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    dataset = synth.generate(config)
    splits = synth.split(dataset)
    synth.save_dataset(args.out, splits)
    _write_run_record(
        args.out, "synth", json.loads(Path(args.out, "manifest.json").read_text())["config"],
        seed=config.seed,
    )
    print(
        json.dumps(
            {
                "out": str(args.out),
                "counts": {"train": len(splits.train), "val": len(splits.val),
                           "test": len(splits.test)},
                "realized_fractions": [float(f) for f in dataset.realized_fractions],
            }
        )
    )
    return 0


def cmd_train(args) -> int:
    config = trainer.train_config_from_json(_read_text(args.config))
    data = synth.load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        report = trainer.train(config, data)
    except trainer.DivergenceError as exc:
        _atomic_write(out / "report.json", exc.report.to_json())
        exc.report.write_epochs_csv(out / "epochs.csv")
        _write_run_record(out, "train", json.loads(trainer.train_config_to_json(config)),
                          seed=config.seed, extra={"diverged": str(exc)})
        print(f"training diverged: {exc}", file=sys.stderr)
        return 2
    _atomic_write(out / "report.json", report.to_json())
    report.write_epochs_csv(out / "epochs.csv")
    trainer.save_checkpoint(out / "checkpoint", report.net)
    _write_run_record(out, "train", json.loads(trainer.train_config_to_json(config)),
                      seed=config.seed)
    fg = report.test_means["dsc"][1:]
    print(json.dumps({"best_epoch": report.best_epoch,
                      "best_val_loss": report.best_val_loss,
                      "test_fg_dsc": [float(v) for v in fg]}))
    return 0


def _workers(args) -> int:
    if args.workers is not None:
        return max(1, args.workers)
    env = os.environ.get("IMLOSS_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise CliError(f"IMLOSS_WORKERS must be an integer, got {env!r}") from None
    return 1


def cmd_bench(args) -> int:
    grid = bench.grid_from_json(_read_text(args.grid))
    table = bench.run_grid(grid, workers=_workers(args),
                           log=(lambda msg: print(msg, file=sys.stderr)) if args.verbose else None)
    table.write_outputs(args.out)
    _write_run_record(
        args.out, "bench", json.loads(_read_text(args.grid)),
        extra={"failures": table.failures(), "incomplete": table.incomplete},
    )
    print(json.dumps({"out": str(args.out), "cells": len(table.cells),
                      "failures": len(table.failures()), "incomplete": table.incomplete}))
    return 2 if table.incomplete else 0


def cmd_sweep(args) -> int:
    gammas = _parse_float_list(args.gammas, "--gammas")
    seeds = _parse_int_list(args.seeds, "--seeds")
    train_cfg = None
    if args.train:
        train_cfg = trainer.train_config_from_json(_read_text(args.train))
    curve, table = bench.gamma_sweep(args.scene, args.variant, gammas, seeds,
                                     train_cfg, workers=_workers(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bench.write_sweep_csv(out / "sweep.csv", curve)
    table.write_outputs(out / "cells")
    _write_run_record(
        out, "sweep",
        {"scene": args.scene, "variant": args.variant, "gammas": gammas, "seeds": seeds},
        extra={"failures": table.failures()},
    )
    print(json.dumps({"out": str(args.out), "points": len(curve)}))
    return 0


def cmd_report(args) -> int:
    rows = _read_text(args.infile).strip().splitlines()
    header = "scene,loss,seed,class,dsc,iou,precision,recall"
    if not rows or rows[0] != header:
        raise CliError(f"{args.infile} does not look like results.csv (expected header {header!r})")
    from collections import defaultdict

    data = defaultdict(lambda: defaultdict(list))
    for line in rows[1:]:
        scene, loss, seed, cls, dsc, iou, precision, recall = line.split(",")
        for metric, value in zip(bench.METRICS, (dsc, iou, precision, recall)):
            data[(scene, int(cls))][(loss, metric)].append(float(value))
    lines = ["# Benchmark report (from results.csv; per-seed means)", ""]
    for (scene, cls) in sorted(data):
        if cls == 0:
            continue
        lines.append(f"## Scene `{scene}`, class {cls}")
        lines.append("")
        lines.append("| Loss | DSC | IoU | Precision | Recall |")
        lines.append("|---|---|---|---|---|")
        losses_here = sorted({loss for loss, _ in data[(scene, cls)]})
        stats = {}
        for loss in losses_here:
            stats[loss] = {}
            for metric in bench.METRICS:
                vals = data[(scene, cls)][(loss, metric)]
                if len(vals) >= 2:
                    from .metrics import mean_ci

                    stats[loss][metric] = mean_ci(vals)
                else:
                    stats[loss][metric] = (vals[0], 0.0)
        best = {m: max(stats[loss][m][0] for loss in losses_here) for m in bench.METRICS}
        for loss in losses_here:
            cells = []
            for m in bench.METRICS:
                mean, ci = stats[loss][m]
                text = f"{mean:.3f}±{ci:.3f}"
                if mean == best[m]:
                    text = f"**{text}**"
                cells.append(text)
            lines.append(f"| {loss} | " + " | ".join(cells) + " |")
        lines.append("")
    _atomic_write(Path(args.out), "\n".join(lines))
    print(json.dumps({"out": str(args.out)}))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="imloss", description=__doc__)
    parser.add_argument("--version", action="version", version=f"imloss {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    p = sub.add_parser("losses", help="print the named loss-preset registry as JSON")
    p.set_defaults(func=cmd_losses)

    p = sub.add_parser("eval", help="evaluate a loss spec on prediction/truth SEGT files")
    p.add_argument("--spec", required=True, help="loss spec JSON file")
    p.add_argument("--pred", required=True, help="prediction SEGT file")
    p.add_argument("--truth", required=True, help="one-hot truth SEGT file")
    p.add_argument("--grad", help="write the gradient (wrt logits) to this SEGT file")
    p.add_argument("--logits", action="store_true",
                   help="treat --pred as logits (softmax applied); default: probabilities")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient oracle")
    p.add_argument("--family", default="all", help="'all' or one loss family name")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--tol", type=float, default=oracle.DEFAULT_TOL)
    p.add_argument("--h", type=float, default=oracle.DEFAULT_H)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shape", default="1,4,4,2", help="comma-separated draw shape")
    p.add_argument("--out", help="directory for gradcheck.json + run.json")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--preset", help=f"one of: {', '.join(sorted(synth.PRESET_SCENES))}")
    p.add_argument("--config", help="scene config JSON file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the small segmentation net on a dataset")
    p.add_argument("--data", required=True, help="dataset directory from `imloss synth`")
    p.add_argument("--config", required=True, help="train config JSON file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="run a loss x scene x seed benchmark grid")
    p.add_argument("--grid", required=True, help="bench grid JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, help="parallel cells (default IMLOSS_WORKERS or 1)")
    p.add_argument("--verbose", action="store_true", help="log each finished cell to stderr")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="Unified Focal gamma-stability sweep")
    p.add_argument("--scene", required=True)
    p.add_argument("--variant", default="both", choices=("sym", "asym", "both"))
    p.add_argument("--gammas", default="0.1,0.3,0.5,0.7,0.9")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--train", help="train config JSON file")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="render a markdown table from a results.csv")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as exc:
        # LossSpecError, NumericsError, SegtError, SynthError, TrainerError,
        # BenchError and JSON decoding errors are all ValueErrors
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
