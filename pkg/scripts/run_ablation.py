"""Module ablation at desk scale: TP, TP+SAA and full, averaged over seeds.

    python scripts/run_ablation.py --seeds 1,2,3 --out runs/ablation
"""

import argparse
import time

from cbsa.config import load_config
from cbsa.runner import run_ablation


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--seeds", default="1,2,3")
    ap.add_argument("--modes", default="tp,tp+saa,full")
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    cfg = load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")]
    modes = args.modes.split(",")
    t0 = time.perf_counter()
    result = run_ablation(cfg, modes, seeds, args.out)
    print(f"{'mode':8s} " + " ".join(f"seed{s:<4d}" for s in seeds) + "   mean")
    for mode in modes:
        runs = result["results"][mode]["runs"]
        mean = result["results"][mode]["summary"]["map_val"]["mean"]
        print(f"{mode:8s} " + " ".join(f"{100 * r['map_val']:8.2f}" for r in runs) + f"  {100 * mean:6.2f}")
    print(f"elapsed {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
