#!/usr/bin/env python3
"""Minimal passing width against input dimension for the intention module and an MLP."""

import argparse
import logging

from intention_kit.tasks import experiments as ex


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--d", default="2,3,4,5,6")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--tolerance", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    spec = ex.ScalingSpec(d_values=[int(v) for v in args.d.split(",")])
    if args.steps:
        spec.steps = args.steps
    if args.tolerance:
        spec.tolerance = args.tolerance
    table, _ = ex.scaling_experiment(spec, args.seed)
    for model, row in table.items():
        print(f"{model:<10}" + "  ".join(f"d={d}: {w}" for d, w in row.items()))


if __name__ == "__main__":
    main()
