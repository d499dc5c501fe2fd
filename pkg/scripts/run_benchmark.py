"""Run every benchmark measurement over a range of seeds and write a CSV.

    python scripts/run_benchmark.py --seeds 0-4 --jobs 4 --out runs/benchmark.csv
"""
from __future__ import annotations

import argparse
import csv
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from dvd.pipeline import PARTS, run_seed


def seed_range(text: str) -> list[int]:
    seeds = []
    for part in text.split(","):
        lo, _, hi = part.partition("-")
        seeds += list(range(int(lo), int(hi or lo) + 1))
    return seeds


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=seed_range, default=seed_range("0-4"))
    ap.add_argument("--parts", default=",".join(PARTS), help="subset of " + ",".join(PARTS))
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", type=Path, default=Path("runs/benchmark.csv"))
    args = ap.parse_args(argv)
    parts = tuple(p for p in args.parts.split(",") if p)

    with ProcessPoolExecutor(args.jobs) as pool:
        rows = list(pool.map(run_seed, args.seeds, [parts] * len(args.seeds)))

    fields = list(dict.fromkeys(k for r in rows for k in r))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)

    width = max(len(f) for f in fields)
    for f in fields:
        if f == "seed":
            continue
        vals = np.array([r[f] for r in rows], dtype=float)
        print(f"{f:<{width}}  mean {vals.mean():.4f}  " + " ".join(f"{v:.4f}" for v in vals))
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
