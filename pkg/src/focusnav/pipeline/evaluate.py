"""Closed-loop evaluation over the scenario grid.

Learned policies run many episodes in lockstep so one network call serves every
live episode; each episode keeps its own GRU hidden state row.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..attention_policy import FocusNavModel
from ..autodiff import Tensor
from ..perception import collate, voxelize
from ..world import Action, EpisodeRecord, Metrics, compute_metrics
from .collect import make_episode, observe_cloud
from .config import SCENARIOS, RunConfig
from .features import goal_vector, proprio_vector
from .rollout import EpisodeRun, ExpertController
from .train import conv_precision

EVAL_TAG = 1000


def eval_tag(scenario: str, seed_index: int) -> int:
    return EVAL_TAG * (SCENARIOS.index(scenario) + 1) + seed_index


def episode_runs(cfg: RunConfig, scenario: str, episodes: int, seed_index: int) -> list[EpisodeRun]:
    runs = []
    for e in range(episodes):
        world, setup, seed = make_episode(cfg, scenario, eval_tag(scenario, seed_index), e)
        runs.append(EpisodeRun(world, setup, cfg.episode, seed))
    return runs


def run_expert(runs: list[EpisodeRun]) -> list[EpisodeRecord]:
    for run in runs:
        ctrl = ExpertController()
        ctrl.reset(run.world, run.setup)
        while (cmd := run.command()) is not None:
            action, info = ctrl.act(run.state, cmd)
            run.advance(cmd, action, info)
    return [r.record() for r in runs]


def run_policy(model: FocusNavModel, cfg: RunConfig, runs: list[EpisodeRun], trace: int = 1) -> list[EpisodeRecord]:
    """Lockstep rollouts; the first ``trace`` episodes also log attention weights."""
    sensors = cfg.sensors.build()
    spec = cfg.net.grid
    hidden = np.zeros((len(runs), cfg.net.gru_hidden))
    while True:
        live = [(i, cmd) for i, run in enumerate(runs) if (cmd := run.command()) is not None]
        if not live:
            break
        idx = np.array([i for i, _ in live])
        grids = [voxelize(observe_cloud(sensors, runs[i].world, runs[i].state), spec) for i in idx]
        s_p = np.stack([proprio_vector(runs[i].state, cmd) for i, cmd in live])
        g_n = np.stack([goal_vector(cmd) for _, cmd in live])
        with ad.no_grad(), conv_precision(cfg.train.fast_conv):
            out = model.frames(collate(grids, spec), s_p, g_n, None, "eval")
            act, h = model.policy(out.m_h, s_p, Tensor(hidden[idx]))
        hidden[idx] = h.data
        for j, (i, cmd) in enumerate(live):
            info = {"waypoints": out.waypoints.data[j].tolist()}
            if out.gate is not None:
                info["gate"] = float(out.gate.g.data[j])
                info["p1"] = float(out.gate.p1.data[j])
            if out.attention is not None and i < trace:
                info["attention"] = out.attention.data[j].mean(axis=0).tolist()
            runs[i].advance(cmd, Action.from_array(act.data[j]), info)
    return [r.record() for r in runs]


def evaluate(cfg: RunConfig, model: FocusNavModel | None, out=None, episodes: int | None = None,
             scenarios=None, seeds: int | None = None, trace: int = 1, log=None) -> dict:
    """Metrics per scenario (pooled over seeds) plus per-seed breakdowns.

    ``model=None`` evaluates the privileged expert itself.
    """
    episodes = cfg.eval_episodes if episodes is None else episodes
    scenarios = tuple(scenarios or cfg.eval_scenarios)
    seeds = cfg.eval_seeds if seeds is None else seeds
    out = Path(out) if out is not None else None
    summary: dict = {"variant": "expert" if model is None else cfg.net.variant, "episodes": episodes,
                     "seeds": seeds, "scenarios": {}}
    for scen in scenarios:
        pooled: list[EpisodeRecord] = []
        per_seed = []
        for k in range(seeds):
            runs = episode_runs(cfg, scen, episodes, k)
            recs = run_expert(runs) if model is None else run_policy(model, cfg, runs, trace)
            for r in recs:
                r.meta["scenario"] = scen
            pooled.extend(recs)
            m = compute_metrics(recs) if recs else None
            per_seed.append(m.to_dict() if m else None)
            if out is not None:
                d = out / scen
                d.mkdir(parents=True, exist_ok=True)
                (d / f"records_seed{k}.jsonl").write_text("".join(r.to_json() + "\n" for r in recs))
            if log and m:
                log(f"{scen} seed {k}: " + " ".join(f"{a}={b:.4g}" for a, b in m.to_dict().items()))
        summary["scenarios"][scen] = {
            "metrics": compute_metrics(pooled).to_dict() if pooled else None,
            "per_seed": per_seed,
        }
    if out is not None:
        (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def metrics_from_records(path) -> Metrics:
    """Recompute Metrics from a dumped records file (or directory of them)."""
    path = Path(path)
    files = sorted(path.glob("**/records_seed*.jsonl")) if path.is_dir() else [path]
    recs = [EpisodeRecord.from_json(l) for f in files for l in f.read_text().splitlines() if l]
    return compute_metrics(recs)
