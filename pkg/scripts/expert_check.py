"""Plan-safety and success rates of the privileged expert on fresh toy worlds.

    python3 scripts/expert_check.py --episodes 100
"""

import argparse
import json

from focusnav.pipeline.config import SCENARIOS, RunConfig
from focusnav.pipeline.evaluate import episode_runs, run_expert
from focusnav.world import compute_metrics


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--episodes", type=int, default=100)
    args = ap.parse_args()
    cfg = RunConfig.toy(args.seed)
    out = {}
    for scen in SCENARIOS:
        runs = episode_runs(cfg, scen, args.episodes, 0)
        unsafe = sum(not r.setup.plan.vertices_safe() for r in runs)
        out[scen] = {"unsafe_plans": unsafe, **compute_metrics(run_expert(runs)).to_dict()}
    print(json.dumps(out, indent=1))


if __name__ == "__main__":
    main()
