"""Train focusnav, wgsca-only and concat on one demo set and compare them on paired worlds.

    python3 scripts/run_ablation.py --demos runs/demos --out runs/ablation --steps 1000
"""

import argparse
import json
import sys
import time
from pathlib import Path

from focusnav.pipeline.ablation import run_ablation, trend_checks
from focusnav.pipeline.config import RunConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--demos", type=Path, required=True)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--episodes", type=int, default=50)
    ap.add_argument("--seeds", type=int, default=3)
    args = ap.parse_args()
    cfg = RunConfig.toy(seed=args.seed)
    t0 = time.perf_counter()
    res = run_ablation(cfg, args.demos, args.out, args.steps, episodes=args.episodes, seeds=args.seeds,
                       log=lambda m: print(m, file=sys.stderr, flush=True))
    checks = trend_checks(res)
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    print(json.dumps({"seconds": time.perf_counter() - t0, "variants": {
        v: r["metrics"] for v, r in res["variants"].items()}}, indent=1))
    return 0 if all(checks.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
