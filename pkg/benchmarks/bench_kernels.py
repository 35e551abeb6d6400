#!/usr/bin/env python3
"""Packed binary convolution: numba kernel vs numpy fallback vs float im2col.

Usage: python benchmarks/bench_kernels.py [--repeats N] [--quick] [--json PATH]
"""
import argparse
import json
import sys

from r2b.bench import format_table, run_benchmark


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--json", help="also write the rows to this file")
    args = ap.parse_args(argv)

    rows = run_benchmark(repeats=args.repeats, quick=args.quick)
    print(format_table(rows))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
