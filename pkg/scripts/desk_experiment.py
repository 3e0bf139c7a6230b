#!/usr/bin/env python3
from __future__ import annotations

import argparse
import logging
import os
import sys

from dastgah.desk import DESK_EPOCHS, DESK_TARGET_ACCURACY, run_desk_experiment
from dastgah.evaluation import render, render_confusion
from dastgah.settings import debug_enabled, load_environment, thread_count


def main() -> int:
    parser = argparse.ArgumentParser(description="synthetic quartertone run: synth, extract, train, evaluate")
    parser.add_argument("--out", default="out/desk", help="working directory")
    parser.add_argument("--epochs", type=int, default=DESK_EPOCHS)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    load_environment()
    logging.basicConfig(
        stream=sys.stderr,
        format="%(levelname)s: %(message)s",
        level=logging.DEBUG if debug_enabled() else logging.INFO,
    )

    result = run_desk_experiment(args.out, epochs=args.epochs, seed=args.seed, n_jobs=thread_count())
    print(render_confusion(result.confusion))
    print()
    print(render(result.report))

    status = "OK" if result.report.accuracy >= DESK_TARGET_ACCURACY else "BELOW TARGET"
    print(f"{status}: {result.segments} segments, {result.state.epoch} epochs, test accuracy {result.report.accuracy:.4f}")
    print(f"out_dir: {os.path.abspath(args.out)}")
    return 0 if status == "OK" else 1


if __name__ == "__main__":
    raise SystemExit(main())
