#!/usr/bin/env python3
"""Train and evaluate the task-ablation suite on the desk-scale phantom set."""

import argparse
import json

from tumorlab.model import ALL_TASKS
from tumorlab.pipeline import ExperimentConfig, reseeded, run_ablations

SUBSETS = [tuple(ALL_TASKS), ("type",), ("segmentation",)]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/ablations")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    config = reseeded(ExperimentConfig(), args.seed)
    report = run_ablations(config, SUBSETS, out_root=args.out, echo=print)
    print(json.dumps(report["rows"], indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
