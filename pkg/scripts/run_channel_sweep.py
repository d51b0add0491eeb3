#!/usr/bin/env python3
"""Train one model per channel width and tabulate retrieval metrics."""

import argparse
import json

from tumorlab.pipeline import ExperimentConfig, channel_sweep, reseeded


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/channels")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--channels", default="16,32,64", help="comma-separated widths")
    args = parser.parse_args()

    config = reseeded(ExperimentConfig(), args.seed)
    values = [int(c) for c in args.channels.split(",") if c]
    report = channel_sweep(config, values, out_root=args.out, echo=print)
    print(json.dumps(report["rows"], indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
