#!/usr/bin/env python3
"""Train every regressor on one task and print final eval MSE next to the closed-form oracle."""

import argparse
import logging

from intention_kit.linalg import ContractError
from intention_kit.tasks import experiments as ex

STEPS = {"sine": 5000, "policy": 10000, "kabsch": 3000}


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("task", choices=sorted(STEPS))
    p.add_argument("--models", default="intention,attention,np,mlp")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    task = ex.default_task(args.task, args.seed)
    steps = args.steps or STEPS[args.task]
    print(f"{args.task}: {steps} steps, seed {args.seed}")
    for kind in args.models.split(","):
        res = ex.train_regressor(task, kind, steps)
        print(f"  {kind:<10} untrained {res.first('eval_mse'):.4g}  trained {res.last('eval_mse'):.4g}")
    try:
        print(f"  {'oracle':<10} {ex.oracle_mse(task):.4g}")
    except ContractError:
        pass


if __name__ == "__main__":
    main()
