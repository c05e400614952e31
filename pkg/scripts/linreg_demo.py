#!/usr/bin/env python3
"""Median Pearson r of every untrained KVQ op on 2-D linear regression."""

import argparse

from intention_kit.tasks import experiments as ex


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-seeds", type=int, default=100)
    args = p.parse_args()
    table = ex.median_table(ex.demo_linreg(args.seed, args.n_seeds))
    print(f"{'model':<18}{'interp r':>14}{'extrap r':>14}")
    for model, row in table.items():
        print(f"{model:<18}{row['pearson_interp']:>14.7f}{row['pearson_extrap']:>14.7f}")


if __name__ == "__main__":
    main()
