"""Baseline vs NSAE on the strong-shift target over several master seeds.

    python3 scripts/main_claim.py --seeds 0 1 2 --out runs/claim
"""

import argparse
import logging
import time

from nsae.config import load_config
from nsae.experiments import main_claim


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/claim")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    wins = 0
    for seed in args.seeds:
        t0 = time.time()
        cfg = load_config(args.config, seed=seed, out=args.out, jobs=args.jobs)
        res = main_claim(cfg, cache_dir=f"{args.out}/checkpoints")
        wins += res.gap > 0
        print(f"seed {seed}: baseline {res.baseline.mean:.4f}+-{res.baseline.ci95:.4f} "
              f"NSAE {res.nsae.mean:.4f}+-{res.nsae.ci95:.4f} gap {100 * res.gap:+.2f} pts | "
              f"icc ratio source {res.icc.ratio('source'):.3f} strong {res.icc.ratio('strong'):.3f} "
              f"({time.time() - t0:.0f}s)", flush=True)
    print(f"NSAE ahead on {wins}/{len(args.seeds)} seeds")


if __name__ == "__main__":
    main()
