#!/usr/bin/env python3
"""How many head-to-class pairings a random relabeling gets right.

For each N, prints the fixed-point histogram of the symmetric group and the
accuracy a model would get if only correctly paired heads score.
"""

import argparse
import math

from unimaml.episodes import fixed_point_histogram


def main() -> None:
    ap = argparse.ArgumentParser(description="fixed points of random permutations")
    ap.add_argument("--max-n", type=int, default=6)
    args = ap.parse_args()
    for n in range(2, args.max_n + 1):
        hist = fixed_point_histogram(n)
        mean = sum(k * c for k, c in hist.items()) / math.factorial(n)
        bins = "  ".join(f"{k}:{c}" for k, c in sorted(hist.items(), reverse=True))
        print(f"N={n}  {bins}  mean fixed points {mean:.3f}  expected acc {100 * mean / n:.2f}%")


if __name__ == "__main__":
    main()
