#!/usr/bin/env python3
"""Outlier accuracy of a block stack against depth on the synthetic anomaly task."""

import argparse

from intention_kit.blocks import BLOCK_KINDS
from intention_kit.tasks import experiments as ex


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--kind", choices=BLOCK_KINDS, default="sigma-informer")
    p.add_argument("--layers", default="1,2,4")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    print(f"LOO-centroid oracle: {ex.anomaly_oracle_accuracy(args.seed):.3f}")
    for L in (int(v) for v in args.layers.split(",")):
        res = ex.anomaly_run(L, args.epochs, args.seed, kind=args.kind)
        print(f"{args.kind} {L} layer(s): accuracy {res.last('eval_accuracy'):.3f}")


if __name__ == "__main__":
    main()
