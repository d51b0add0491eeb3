#!/usr/bin/env python3
"""Run the default desk-scale experiment end to end and print the key metrics."""

import argparse
import json
import time

from tumorlab.pipeline import ExperimentConfig, reseeded, run_pipeline


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/desk", help="experiment directory")
    parser.add_argument("--seed", type=int, default=0, help="global seed")
    args = parser.parse_args()

    config = reseeded(ExperimentConfig(), args.seed)
    t0 = time.time()
    summary = run_pipeline(config, args.out, echo=print)
    print(f"\ntotal wall time: {time.time() - t0:.0f}s")
    print(json.dumps(summary["metrics"], indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
