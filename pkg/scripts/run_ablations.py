"""Paired ablation table: every named variant against the full method, per seed.

Each seed shares one source classifier; drift models are trained once per
prior and reused by every variant that samples from that prior.

    python scripts/run_ablations.py --variants full,mean-pool,augment-only --seeds 0-4
"""
from __future__ import annotations

import argparse
import csv
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from dvd import pipeline as pl

from run_benchmark import seed_range


def one_seed(seed: int, variants: tuple) -> list[dict]:
    cfg = pl.BenchmarkConfig(seed=seed)
    stage = pl.pretrain_stage(cfg)
    rows = [{"variant": "source-only", "seed": seed, "accuracy": pl.target_accuracy(stage, stage.encoder)}]
    drifts = {}
    for name in variants:
        prior = pl.ABLATIONS[name][0]
        enc, drifts[prior] = pl.run_ablation(stage, name, cfg, drift=drifts.get(prior))
        rows.append({"variant": name, "seed": seed, "accuracy": pl.target_accuracy(stage, enc)})
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variants", default=",".join(pl.ABLATIONS))
    ap.add_argument("--seeds", type=seed_range, default=seed_range("0-4"))
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", type=Path, default=Path("runs/ablations.csv"))
    args = ap.parse_args(argv)
    variants = tuple(v for v in args.variants.split(",") if v)
    bad = [v for v in variants if v not in pl.ABLATIONS]
    if bad:
        ap.error(f"unknown variants {bad}")

    with ProcessPoolExecutor(args.jobs) as pool:
        rows = [r for chunk in pool.map(one_seed, args.seeds, [variants] * len(args.seeds)) for r in chunk]

    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["variant", "seed", "accuracy"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)

    for name in ("source-only", *variants):
        acc = np.array([r["accuracy"] for r in rows if r["variant"] == name])
        print(f"{name:<20s} mean {acc.mean():.4f}  " + " ".join(f"{a:.4f}" for a in acc))
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
