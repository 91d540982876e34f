"""Expert demonstration collection and the on-disk DemoSet format.

Layout of a DemoSet directory::

    manifest.json      count, steps, seed, config hash, schema version
    config.json        RunConfig snapshot
    episodes.jsonl     one EpisodeRecord per line
    demos.jsonl        one line per step: cloud reference, S_p, g_n, waypoints, action, S_m
    clouds/epNNNNNN.fnv  robot-frame clouds and traversability labels of one episode
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..autodiff import load_tensors, save_tensors
from ..planner.expert import project_onto_polyline, waypoint_labels
from ..sensors import SensorSuite
from ..world import Action, EpisodeRecord, World, generate_world, stability_metric
from .config import SCHEMA_VERSION, RunConfig, derive_seed
from .features import goal_vector, proprio_vector
from .rollout import ExpertController, ResampleLimitError, run_episode, sample_episode

# seed-stream tags for derive_seed
STREAM_WORLD, STREAM_EPISODE, STREAM_WALKER, STREAM_NOISE = 1, 2, 3, 4


class DemoSetError(ValueError):
    pass


def make_episode(cfg: RunConfig, scenario: str, tag: int, index: int):
    """World, episode setup, and walker seed for episode ``index`` of a scenario stream.

    Worlds that admit no valid episode are regenerated with the next attempt counter.
    """
    for attempt in range(cfg.episode.max_resamples):
        wseed = derive_seed(cfg.seed, STREAM_WORLD, tag, index, attempt)
        world = generate_world(cfg.scenarios.world(cfg.world, scenario, wseed))
        rng = np.random.default_rng(derive_seed(cfg.seed, STREAM_EPISODE, tag, index, attempt))
        try:
            setup = sample_episode(world, rng, cfg.episode)
        except ResampleLimitError:
            continue
        return world, setup, derive_seed(cfg.seed, STREAM_WALKER, tag, index, attempt)
    raise ResampleLimitError(f"{scenario} episode {index}: no valid world after {cfg.episode.max_resamples} tries")


def observe_cloud(sensors: SensorSuite, world: World, state) -> np.ndarray:
    """Fused robot-frame cloud at the walker's current pose."""
    return sensors.observe(state.pose(), world.scene(state.t), "robot").points


class NoisyExpert(ExpertController):
    """Expert whose executed action carries AR(1) noise.

    The clean, bound-clamped expert action stays available as ``label``, so the
    demonstrations cover recovery from states the expert itself never drifts into.
    """

    def __init__(self, scale, corr: float, bounds, rng: np.random.Generator):
        super().__init__()
        self.scale, self.corr, self.bounds, self.rng = np.asarray(scale, float), corr, bounds, rng
        self.noise = np.zeros(3)
        self.label: Action | None = None

    def act(self, state, command):
        clean, info = super().act(state, command)
        self.label = clean.clamped(self.bounds)
        eps = self.rng.normal(size=3) * self.scale
        self.noise = self.corr * self.noise + np.sqrt(1.0 - self.corr ** 2) * eps
        return Action.from_array(self.label.as_array() + self.noise).clamped(self.bounds), info


def collect(cfg: RunConfig, out, episodes: int | None = None, log=None) -> dict:
    cfg.validate()
    n = cfg.collect_episodes if episodes is None else episodes
    out = Path(out)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    sensors = cfg.sensors.build()
    grid = cfg.net.grid
    total_steps = 0
    outcomes: dict[str, int] = {}
    with open(out / "episodes.jsonl", "w") as f_ep, open(out / "demos.jsonl", "w") as f_demo:
        for e in range(n):
            scenario = cfg.collect_scenarios[e % len(cfg.collect_scenarios)]
            world, setup, seed = make_episode(cfg, scenario, 0, e)
            expert = NoisyExpert(cfg.collect_noise, cfg.collect_noise_corr, cfg.episode.walker,
                                 np.random.default_rng(derive_seed(cfg.seed, STREAM_NOISE, 0, e)))
            clouds, travs, rows = [], [], []

            def on_step(k, state, cmd, action):
                fol = expert.follower
                prog = project_onto_polyline(fol.plan.polyline, state.xy, fol.progress - 0.3, fol.progress + 1.5)
                clouds.append(observe_cloud(sensors, world, state).astype(np.float32))
                trav, _ = world.robot_centric(state.xy, state.yaw, grid.size, grid.cell, state.t)
                travs.append(trav.astype(np.float32))
                q = waypoint_labels(fol.plan.polyline, state.xy, state.yaw, prog, cfg.net.n_waypoints,
                                    grid.extent, cfg.episode.goal_tolerance)
                rows.append({
                    "episode": e, "step": k, "scenario": scenario,
                    "cloud": f"clouds/ep{e:06d}.fnv#{k}",
                    "s_p": proprio_vector(state, cmd).tolist(),
                    "g_n": goal_vector(cmd).tolist(),
                    "waypoints": q.tolist(),
                    "action": expert.label.as_array().tolist(),
                    "stability": state_stability(state, cfg),
                })
                return {}

            rec = run_episode(world, setup, expert, cfg.episode, seed, on_step)
            rec.meta["scenario"] = scenario
            rec.meta["world_seed"] = world.config.seed
            f_ep.write(rec.to_json() + "\n")
            for r in rows:
                f_demo.write(json.dumps(r) + "\n")
            _write_episode_arrays(out / "clouds" / f"ep{e:06d}.fnv", clouds, travs, grid.size)
            total_steps += len(rows)
            outcomes[rec.outcome] = outcomes.get(rec.outcome, 0) + 1
            if log:
                log(f"episode {e} {scenario} {rec.outcome} steps={len(rows)}")
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "count": n,
        "steps": total_steps,
        "seed": cfg.seed,
        "config_hash": cfg.data_hash(),
        "outcomes": dict(sorted(outcomes.items())),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out / "config.json").write_text(cfg.to_json() + "\n")
    return manifest


def state_stability(state, cfg: RunConfig) -> float:
    return stability_metric([state.roll, state.pitch], [state.wx, state.wy], cfg.episode.k1, cfg.episode.k2)


def _write_episode_arrays(path: Path, clouds: list[np.ndarray], travs: list[np.ndarray], size: int):
    counts = np.array([len(c) for c in clouds], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    if offsets[-1] >= 2 ** 24:
        raise DemoSetError("episode cloud too large for exact float32 offsets")
    save_tensors(path, {
        "points": np.concatenate(clouds) if clouds else np.zeros((0, 3), np.float32),
        "offsets": offsets.astype(np.float32),
        "traversability": np.stack(travs) if travs else np.zeros((0, size, size), np.float32),
    })


# -- loading ---------------------------------------------------------------------

@dataclass
class EpisodeDemo:
    clouds: list[np.ndarray]
    proprio: np.ndarray  # (T, 15)
    goal: np.ndarray  # (T, 3)
    waypoints: np.ndarray  # (T, N, 2)
    actions: np.ndarray  # (T, 3)
    stability: np.ndarray  # (T,)
    traversability: np.ndarray  # (T, H, W)
    scenario: str

    def __len__(self):
        return len(self.actions)


@dataclass
class DemoSet:
    manifest: dict
    episodes: list[EpisodeDemo]
    records: list[EpisodeRecord]

    @property
    def steps(self) -> int:
        return sum(len(e) for e in self.episodes)


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DemoSetError(f"{root}: no manifest.json")
    return json.loads(path.read_text())


def check_compatible(manifest: dict, cfg: RunConfig):
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise DemoSetError(f"demo schema {manifest.get('schema_version')} != {SCHEMA_VERSION}")
    if manifest.get("config_hash") != cfg.data_hash():
        raise DemoSetError(f"demo config hash {manifest.get('config_hash')} does not match "
                           f"the run config ({cfg.data_hash()})")


def load_demos(root, cfg: RunConfig | None = None) -> DemoSet:
    root = Path(root)
    manifest = read_manifest(root)
    if cfg is not None:
        check_compatible(manifest, cfg)
    records = [EpisodeRecord.from_json(l) for l in (root / "episodes.jsonl").read_text().splitlines() if l]
    by_ep: dict[int, list[dict]] = {}
    for line in (root / "demos.jsonl").read_text().splitlines():
        if line:
            row = json.loads(line)
            by_ep.setdefault(row["episode"], []).append(row)
    episodes = []
    for e in range(manifest["count"]):
        rows = by_ep.get(e, [])
        arrays = load_tensors(root / "clouds" / f"ep{e:06d}.fnv")
        offsets = arrays["offsets"].astype(np.int64)
        pts = arrays["points"].astype(np.float64)
        if len(offsets) != len(rows) + 1:
            raise DemoSetError(f"episode {e}: {len(rows)} demo rows but {len(offsets) - 1} clouds")
        episodes.append(EpisodeDemo(
            clouds=[pts[offsets[k]:offsets[k + 1]] for k in range(len(rows))],
            proprio=np.array([r["s_p"] for r in rows]).reshape(-1, 15),
            goal=np.array([r["g_n"] for r in rows]).reshape(-1, 3),
            waypoints=np.array([r["waypoints"] for r in rows]).reshape(len(rows), -1, 2),
            actions=np.array([r["action"] for r in rows]).reshape(-1, 3),
            stability=np.array([r["stability"] for r in rows]),
            traversability=arrays["traversability"].astype(np.float64),
            scenario=rows[0]["scenario"] if rows else "",
        ))
    return DemoSet(manifest, episodes, records)
