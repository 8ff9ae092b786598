"""Nine-row handcrafted-noise table on the strong-shift target for several seeds.

    python3 scripts/noise_study.py --seeds 0 1 2 --out runs/noise
"""

import argparse
import logging
import time

from nsae.config import load_config
from nsae.experiments import build_benchmark, noise_study


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/noise")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    wins = 0
    for seed in args.seeds:
        t0 = time.time()
        cfg = load_config(args.config, seed=seed, out=args.out, jobs=args.jobs)
        cfg.data.targets = ("strong",)
        table = noise_study(build_benchmark(cfg), cfg, cache_dir=f"{args.out}/checkpoints")
        table.write(args.out, f"noise_study_seed{seed}")
        nsae = table.cell("NSAE", "strong").mean
        best_a = max(r["report"].mean for r in table.rows if r.get("setting") == "a")
        wins += nsae >= best_a
        print(table.to_csv(), end="")
        print(f"seed {seed}: NSAE {nsae:.4f} vs best setting (a) {best_a:.4f} ({time.time() - t0:.0f}s)", flush=True)
    print(f"NSAE >= best setting (a) on {wins}/{len(args.seeds)} seeds")


if __name__ == "__main__":
    main()
