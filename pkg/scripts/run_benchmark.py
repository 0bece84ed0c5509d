#!/usr/bin/env python3
"""Run the full preset benchmark: every loss preset on every scene tier.

Writes results.csv / summary.csv / pvalues.csv / report.md under --out.
Expect a few hours single-threaded at the default sizes; use --seeds and
--scenes to trim, or IMLOSS_WORKERS / --workers for parallel cells.
"""

import argparse
import json
import sys
import tempfile
from pathlib import Path

from imloss.cli import main as cli_main


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="bench_out")
    parser.add_argument("--scenes", default="moderate,low,severe,nested")
    parser.add_argument("--losses", default=",".join(
        ("ce", "focal", "dice", "tversky", "focal_tversky", "combo",
         "unified_focal_sym", "unified_focal_asym")))
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--max-epochs", type=int, default=200)
    parser.add_argument("--workers", type=int, default=None)
    args = parser.parse_args()

    grid = {
        "scenes": args.scenes.split(","),
        "losses": args.losses.split(","),
        "seeds": [int(s) for s in args.seeds.split(",")],
        "train": {"max_epochs": args.max_epochs},
    }
    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as f:
        json.dump(grid, f)
        grid_path = f.name
    argv = ["bench", "--grid", grid_path, "--out", args.out, "--verbose"]
    if args.workers:
        argv += ["--workers", str(args.workers)]
    code = cli_main(argv)
    Path(grid_path).unlink()
    if code == 0:
        print(f"report: {Path(args.out) / 'report.md'}")
    return code


if __name__ == "__main__":
    sys.exit(main())
