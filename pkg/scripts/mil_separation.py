#!/usr/bin/env python3
"""Aggregation-method comparison on synthetic correlated bags.

Generates a labeled bag dataset in memory, trains the three aggregation
baselines and the attention head under one shared recipe, and prints a
test-set comparison table.  Defaults reproduce the acceptance-scale
experiment (several minutes); pass --bags 700 for a quick look.
"""

import argparse
import time

from detectbert.data import SynthConfig, synth_bag
from detectbert.model import ModelConfig
from detectbert.training import TrainConfig, evaluate, train

MODELS = ("random_selection", "elementwise_addition", "elementwise_average", "detectbert")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--bags", type=int, default=2750)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--landmarks", type=int, default=32)
    ap.add_argument("--pinv-iters", type=int, default=6)
    ap.add_argument("--data-seed", type=int, default=42)
    ap.add_argument("--train-seed", type=int, default=7)
    args = ap.parse_args()

    scfg = SynthConfig(
        num_bags=args.bags, d=args.dim, bag_size_min=20, bag_size_max=200,
        witness_rate=0.05, positive_fraction=0.4, seed=args.data_seed,
    )
    print(f"generating {args.bags} bags (d={args.dim}, seed={args.data_seed})")
    bags = [synth_bag(scfg, i)[0] for i in range(args.bags)]
    n_test = max(1, args.bags // 5)
    n_val = max(1, args.bags // 11)
    n_train = args.bags - n_test - n_val
    train_bags = bags[:n_train]
    val_bags = bags[n_train:n_train + n_val]
    test_bags = bags[n_train + n_val:]
    print(f"splits: {n_train} train / {n_val} val / {n_test} test")

    tc = TrainConfig(epochs=args.epochs, seed=args.train_seed)
    mc = ModelConfig(d=args.dim, heads=args.heads, landmarks=args.landmarks,
                     pinv_iters=args.pinv_iters)

    print(f"{'model':24s} {'acc':>6s} {'prec':>6s} {'rec':>6s} {'f1':>6s} {'time':>8s}")
    for kind in MODELS:
        t0 = time.perf_counter()
        result = train(tc, train_bags, val_bags, kind=kind, model_config=mc)
        metrics, _ = evaluate(result.params, test_bags, kind=kind)
        elapsed = time.perf_counter() - t0
        print(
            f"{kind:24s} {metrics.accuracy:6.3f} {metrics.precision:6.3f} "
            f"{metrics.recall:6.3f} {metrics.f1:6.3f} {elapsed:7.1f}s"
        )


if __name__ == "__main__":
    main()
