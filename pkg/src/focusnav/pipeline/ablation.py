"""Variant comparison: train each network variant on one demo set, evaluate on paired worlds."""

from __future__ import annotations

import json
import time
from pathlib import Path

from .config import RunConfig
from .evaluate import evaluate
from .train import load_model, train

# scenario cells each variant is evaluated on; focusnav covers every cell it is compared on
DEFAULT_CELLS = {
    "focusnav": ("flat-static", "flat-dynamic", "unstructured-static", "unstructured-dynamic"),
    "concat": ("flat-static", "flat-dynamic", "unstructured-static", "unstructured-dynamic"),
    "wgsca-only": ("unstructured-static",),
}


def run_ablation(cfg: RunConfig, demo_dir, out, steps: int, cells: dict | None = None,
                 episodes: int | None = None, seeds: int | None = None, log=None) -> dict:
    """Train every variant for the same number of steps, then evaluate on shared eval seeds.

    Every variant starts from the same run seed, so shared modules get the same
    initial weights and the sampler draws the same windows.
    """
    cells = cells or DEFAULT_CELLS
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    results: dict = {"steps": steps, "variants": {}}
    for variant, scenarios in cells.items():
        vcfg = cfg.with_variant(variant)
        t0 = time.perf_counter()
        train(vcfg, demo_dir, out / variant / "train", steps=steps, log=log)
        t1 = time.perf_counter()
        model, _ = load_model(out / variant / "train" / "final", vcfg)
        summary = evaluate(vcfg, model, out / variant / "eval", episodes, scenarios, seeds, log=log)
        t2 = time.perf_counter()
        results["variants"][variant] = {
            "metrics": {s: v["metrics"] for s, v in summary["scenarios"].items()},
            "train_seconds": t1 - t0,
            "eval_seconds": t2 - t1,
        }
    (out / "ablation.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    return results


def trend_checks(results: dict) -> dict[str, bool]:
    """Gated model at least as stable as the always-open one on rough terrain; never less successful than pooling."""
    v = results["variants"]
    checks = {}
    if "wgsca-only" in v:
        fn, wo = v["focusnav"]["metrics"], v["wgsca-only"]["metrics"]
        for scen in wo:
            checks[f"stability {scen}: focusnav >= wgsca-only"] = fn[scen]["stability"] >= wo[scen]["stability"]
    if "concat" in v:
        fn, cc = v["focusnav"]["metrics"], v["concat"]["metrics"]
        for scen in cc:
            checks[f"success {scen}: focusnav >= concat"] = fn[scen]["success"] >= cc[scen]["success"]
    return checks
