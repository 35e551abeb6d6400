#!/usr/bin/env python3
"""Reduced-scale CIFAR ablation: every schedule preset over several seeds.

Needs the CIFAR binary batches under $R2B_DATA_DIR (or --data-dir). Prints
per-row medians and any violation of the expected ordering; exits 1 on a
violation.
"""
import argparse
import statistics
import sys

from r2b.data import data_dir, load_cifar
from r2b.experiments import AblationSettings, check_ordering, run_ablation


def main(argv=None):
    ap = argparse.ArgumentParser(description="reduced-scale preset ablation")
    ap.add_argument("--dataset", default="cifar10", choices=("cifar10", "cifar100"))
    ap.add_argument("--data-dir")
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--width", type=int, default=64)
    ap.add_argument("--batch-size", type=int, default=128)
    args = ap.parse_args(argv)

    root = args.data_dir or data_dir()
    if root is None:
        ap.error("no dataset root: pass --data-dir or set R2B_DATA_DIR")
    train, test = load_cifar(root, args.dataset)
    settings = AblationSettings(seeds=tuple(args.seeds), epochs=args.epochs, width=args.width,
                                batch_size=args.batch_size)
    results = run_ablation(train, test, args.out, settings)
    for row, accs in results.items():
        print(f"{row:<12} median {statistics.median(accs):6.2f}   seeds {accs}")
    problems = check_ordering(results)
    for p in problems:
        print("ordering violated:", p)
    return 1 if problems else 0


if __name__ == "__main__":
    sys.exit(main())
