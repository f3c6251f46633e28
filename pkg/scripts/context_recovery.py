"""Spectral context recovery from the labeled split across leak rates and seeds."""

import argparse

import numpy as np

from cbsa.config import load_config
from cbsa.context import context_partition
from cbsa.runner import materialize


def same_partition(a, b):
    return sorted(map(sorted, a)) == sorted(map(sorted, b))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", default="1,2,3,4,5")
    ap.add_argument("--leaks", default="0.0,0.03,0.05,0.1,0.2")
    args = ap.parse_args()

    seeds = [int(s) for s in args.seeds.split(",")]
    print("leak   recovered")
    for leak in map(float, args.leaks.split(",")):
        cfg = load_config(environ={})
        cfg.data.cross_context_leak = leak
        hits = 0
        for s in seeds:
            loaded = materialize(cfg, s)
            part = context_partition(loaded.data.labels_l, cfg.data.K_true, seed=s)
            hits += same_partition(part.blocks(), loaded.spec.labels_per_context)
        print(f"{leak:5.2f}  {hits}/{len(seeds)}")


if __name__ == "__main__":
    main()
