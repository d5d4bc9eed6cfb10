#!/usr/bin/env python3
"""Train vanilla and unicorn MAML on the desk-scale pool and print a comparison table.

    python3 scripts/desk_benchmark.py --seeds 0 1 2 --steps 1 5 15 --out runs/desk
"""

import argparse
import csv
import time
from pathlib import Path

from unimaml.desk import desk_run, desk_setup


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, nargs="+", default=[1, 5, 15])
    ap.add_argument("--variants", nargs="+", default=["vanilla", "unicorn"])
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    t0 = time.perf_counter()
    for seed in args.seeds:
        setup = desk_setup(seed)
        for variant in args.variants:
            for m in args.steps:
                _, report = desk_run(setup, variant, m)
                rows.append({"seed": seed, "variant": variant, "steps": m,
                             "mean_acc": report.mean_acc, "ci95": report.ci95})
                print(f"seed {seed}  {variant:<8} M={m:<3} {report.mean_acc:6.2f} +- {report.ci95:.2f}")
    with open(out / "desk_benchmark.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    print(f"done in {time.perf_counter() - t0:.0f} s; table in {out / 'desk_benchmark.csv'}")


if __name__ == "__main__":
    main()
