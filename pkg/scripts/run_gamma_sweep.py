#!/usr/bin/env python3
"""Sweep the Unified Focal focal parameter and plot-ready CSV the DSC curve."""

import argparse
import sys

from imloss.cli import main as cli_main


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--scene", default="low")
    parser.add_argument("--variant", default="both", choices=("sym", "asym", "both"))
    parser.add_argument("--gammas", default="0.1,0.3,0.5,0.7,0.9")
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--out", default="sweep_out")
    parser.add_argument("--workers", type=int, default=None)
    args = parser.parse_args()
    argv = ["sweep", "--scene", args.scene, "--variant", args.variant,
            "--gammas", args.gammas, "--seeds", args.seeds, "--out", args.out]
    if args.workers:
        argv += ["--workers", str(args.workers)]
    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
