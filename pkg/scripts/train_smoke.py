"""Collect toy demonstrations, behaviour-clone for a fixed budget, report offline metrics.

    python3 scripts/train_smoke.py --out runs/smoke --demos 200 --steps 2000
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from focusnav.pipeline.collect import collect, load_demos
from focusnav.pipeline.config import RunConfig
from focusnav.pipeline.train import load_model, moving_average, offline_metrics, train


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--demos", type=int, default=200)
    ap.add_argument("--steps", type=int, default=2000)
    args = ap.parse_args()
    cfg = RunConfig.toy(args.seed)
    demo_dir, run_dir = args.out / "demos", args.out / "train"
    t0 = time.perf_counter()
    if not (demo_dir / "manifest.json").exists():
        collect(cfg, demo_dir, episodes=args.demos)
    t1 = time.perf_counter()
    train(cfg, demo_dir, run_dir, steps=args.steps, log=lambda m: print(m, file=sys.stderr, flush=True))
    t2 = time.perf_counter()
    totals = np.loadtxt(run_dir / "losses.csv", delimiter=",", skiprows=1, usecols=5)
    ma = moving_average(totals, 100)
    model, _ = load_model(run_dir / "final", cfg)
    report = {
        "collect_seconds": t1 - t0,
        "train_seconds": t2 - t1,
        "total_first_100": float(ma[0]),
        "total_last_100": float(ma[-1]),
        **offline_metrics(model, load_demos(demo_dir, cfg), cfg),
    }
    print(json.dumps(report, indent=1))


if __name__ == "__main__":
    main()
