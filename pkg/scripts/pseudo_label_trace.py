"""Pseudo-label CF1 and coverage per epoch for one run (full method by default).

    python scripts/pseudo_label_trace.py --seed 1 --out runs/trace
"""

import argparse
import math

from cbsa.config import load_config
from cbsa.runner import read_metrics, run_one


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--ablate", default="full")
    ap.add_argument("--out", default="runs/trace")
    args = ap.parse_args()

    cfg = load_config(args.config)
    run_one(cfg, args.seed, args.out, args.ablate)
    print("epoch  pseudo_cf1  coverage   map_val")
    for row in read_metrics(f"{args.out}/metrics.csv"):
        if math.isnan(row["pseudo_cf1"]):
            continue
        print(f"{int(row['epoch']):5d}  {row['pseudo_cf1']:10.4f}  {row['pseudo_coverage']:8.4f}  {row['map_val']:8.4f}")


if __name__ == "__main__":
    main()
