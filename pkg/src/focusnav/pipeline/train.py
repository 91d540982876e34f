"""Behaviour-cloning training loop over fixed-length windows of demonstrations."""

from __future__ import annotations

import csv
import json
import math
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..attention_policy import FocusNavModel, TrainBatch, loss_total
from ..autodiff.checkpoint import quantize
from ..perception import collate, loss_traversability, voxelize
from ..planner.predictor import waypoint_error
from .collect import DemoSet, load_demos
from .config import RunConfig, derive_seed

CSV_COLUMNS = ("step", "L_bc", "L_t", "L_p", "L_g", "total")
STREAM_INIT, STREAM_SAMPLER, STREAM_GATE, STREAM_PROBE = 11, 12, 13, 14


class TrainingError(RuntimeError):
    pass


class CheckpointMismatchError(ValueError):
    pass


@contextmanager
def conv_precision(fast: bool):
    ad.set_conv_precision(np.float32 if fast else np.float64)
    try:
        yield
    finally:
        ad.set_conv_precision(np.float64)


def build_batch(demos: DemoSet, picks: list[tuple[int, int]], window: int, cfg: RunConfig,
                with_labels: bool = True) -> TrainBatch:
    """Windows (episode, start) → a TrainBatch with frames flattened window-major."""
    spec = cfg.net.grid
    grids, fields = [], {k: [] for k in ("proprio", "goal", "waypoints", "actions", "traversability", "stability")}
    for e, s in picks:
        ep = demos.episodes[e]
        sl = slice(s, s + window)
        grids.extend(voxelize(c, spec) for c in ep.clouds[sl])
        for k in fields:
            fields[k].append(getattr(ep, k)[sl])
    arr = {k: np.stack(v) for k, v in fields.items()}
    if not with_labels:
        return TrainBatch(collate(grids, spec), arr["proprio"], arr["goal"])
    return TrainBatch(collate(grids, spec), **arr)


def window_index(demos: DemoSet, window: int) -> list[tuple[int, int]]:
    idx = [(e, s) for e, ep in enumerate(demos.episodes) for s in range(len(ep) - window + 1)]
    if not idx:
        raise TrainingError(f"no demonstration episode is at least {window} steps long")
    return idx


@dataclass
class Trainer:
    cfg: RunConfig
    demos: DemoSet
    model: FocusNavModel
    opt: ad.Adam
    sampler: np.random.Generator
    gate_rng: np.random.Generator
    step: int = 0

    @classmethod
    def create(cls, cfg: RunConfig, demos: DemoSet) -> "Trainer":
        model = FocusNavModel(cfg.net, np.random.default_rng(derive_seed(cfg.seed, STREAM_INIT)))
        t = cfg.train
        opt = ad.Adam(model.parameters(), t.lr, t.beta1, t.beta2, t.eps, t.grad_clip)
        return cls(cfg, demos, model, opt, np.random.default_rng(derive_seed(cfg.seed, STREAM_SAMPLER)),
                   np.random.default_rng(derive_seed(cfg.seed, STREAM_GATE)))

    def __post_init__(self):
        self.windows = window_index(self.demos, self.cfg.train.window)

    def sample(self) -> TrainBatch:
        t = self.cfg.train
        picks = [self.windows[i] for i in self.sampler.integers(len(self.windows), size=t.batch_windows)]
        return build_batch(self.demos, picks, t.window, self.cfg)

    def train_step(self) -> dict:
        batch = self.sample()
        with conv_precision(self.cfg.train.fast_conv):
            self.opt.zero_grad()
            loss, parts = loss_total(self.model, batch, self.cfg.loss, self.gate_rng, "train")
            if not all(math.isfinite(v) for v in parts.values()):
                raise TrainingError(f"non-finite loss at step {self.step + 1}: {parts}")
            loss.backward()
        norm = self.opt.grad_norm()
        if not math.isfinite(norm):
            raise TrainingError(f"non-finite gradient norm at step {self.step + 1}: {parts}")
        self.opt.step()
        self.step += 1
        return {"step": self.step, **parts}

    # -- checkpoints -------------------------------------------------------------
    def quantize_state(self):
        """Snap parameters and optimizer moments to float32 so a save/load round trip is exact."""
        for p in self.model.parameters():
            p.data = quantize(p.data)
        st = self.opt.state
        st.m = [quantize(m) for m in st.m]
        st.v = [quantize(v) for v in st.v]

    def save(self, path):
        path = Path(path)
        self.quantize_state()
        tensors = {f"param/{k}": v for k, v in self.model.state_dict().items()}
        names = [k for k, _ in self.model.named_parameters()]
        st = self.opt.state
        for name, m, v in zip(names, st.m, st.v):
            tensors[f"adam_m/{name}"] = m
            tensors[f"adam_v/{name}"] = v
        ad.save_tensors(path.with_suffix(".fnv"), tensors)
        meta = {
            "step": self.step,
            "adam_step": st.step,
            "model_hash": self.cfg.model_hash(),
            "sampler": self.sampler.bit_generator.state,
            "gate_rng": self.gate_rng.bit_generator.state,
            "config": self.cfg.to_dict(),
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")

    @classmethod
    def resume(cls, path, demos: DemoSet, cfg: RunConfig | None = None) -> "Trainer":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        cfg = cfg or RunConfig.from_dict(meta["config"])
        tr = cls.create(cfg, demos)
        tensors = load_checkpoint_model(path, tr.model, cfg)
        names = [k for k, _ in tr.model.named_parameters()]
        if meta["adam_step"]:
            tr.opt.state = ad.AdamState(
                meta["adam_step"],
                [tensors[f"adam_m/{n}"].astype(np.float64) for n in names],
                [tensors[f"adam_v/{n}"].astype(np.float64) for n in names])
        tr.sampler.bit_generator.state = meta["sampler"]
        tr.gate_rng.bit_generator.state = meta["gate_rng"]
        tr.step = meta["step"]
        return tr


def load_checkpoint_model(path, model: FocusNavModel, cfg: RunConfig) -> dict:
    """Load parameters into ``model``; refuses checkpoints built for another network layout."""
    path = Path(path)
    meta_path = path.with_suffix(".json")
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if meta.get("model_hash") != cfg.model_hash():
            raise CheckpointMismatchError(f"{path}: checkpoint network hash {meta.get('model_hash')} "
                                          f"does not match config ({cfg.model_hash()})")
    tensors = ad.load_tensors(path.with_suffix(".fnv"))
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    try:
        model.load_state_dict(params)
    except (KeyError, ad.ShapeError) as exc:
        raise CheckpointMismatchError(f"{path}: {exc}") from None
    return tensors


def load_model(path, cfg: RunConfig | None = None) -> tuple[FocusNavModel, RunConfig]:
    path = Path(path)
    if cfg is None:
        cfg = RunConfig.from_dict(json.loads(path.with_suffix(".json").read_text())["config"])
    model = FocusNavModel(cfg.net, np.random.default_rng(0))
    load_checkpoint_model(path, model, cfg)
    return model, cfg


def moving_average(values, window: int = 100) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([v.mean()]) if len(v) else v
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window


def train(cfg: RunConfig, demo_dir, out, steps: int | None = None, resume=None, log=None) -> dict:
    """Train and write losses.csv, best/final checkpoints, and a summary JSON."""
    cfg.validate()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    demos = load_demos(demo_dir, cfg)
    tr = Trainer.resume(resume, demos, cfg) if resume else Trainer.create(cfg, demos)
    total_steps = cfg.train.steps if steps is None else steps
    csv_path = out / "losses.csv"
    mode = "a" if resume and csv_path.exists() else "w"
    history: list[float] = []
    best = math.inf
    with open(csv_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(CSV_COLUMNS)
        while tr.step < total_steps:
            try:
                row = tr.train_step()
            except TrainingError as exc:
                (out / "diagnostics.json").write_text(json.dumps({"step": tr.step + 1, "error": str(exc)}) + "\n")
                raise
            writer.writerow([row[c] if c == "step" else repr(float(row[c])) for c in CSV_COLUMNS])
            history.append(row["total"])
            if log and (tr.step % 50 == 0 or tr.step == 1):
                log(" ".join(f"{k}={row[k]:.4g}" for k in CSV_COLUMNS))
            if tr.step % cfg.train.checkpoint_every == 0 or tr.step == total_steps:
                avg = float(moving_average(history)[-1])
                if avg < best:
                    best = avg
                    tr.save(out / "best")
                fh.flush()
    tr.save(out / "final")
    summary = {"steps": tr.step, "final_total": history[-1] if history else None,
               "best_moving_average": best if history else None,
               "initial_total": history[0] if history else None}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


# -- offline diagnostics -------------------------------------------------------------

def offline_metrics(model: FocusNavModel, demos: DemoSet, cfg: RunConfig, frames: int = 256,
                    seed: int = 0) -> dict:
    """Free-running waypoint error, traversability BCE, and eval-mode gate accuracy on demo frames."""
    rng = np.random.default_rng(derive_seed(seed, STREAM_PROBE))
    index = [(e, k) for e, ep in enumerate(demos.episodes) for k in range(len(ep))]
    picks = [index[i] for i in rng.choice(len(index), size=min(frames, len(index)), replace=False)]
    batch = build_batch(demos, picks, 1, cfg)
    Fn = len(picks)
    with ad.no_grad(), conv_precision(cfg.train.fast_conv):
        out = model.frames(batch.voxels, batch.proprio.reshape(Fn, -1), batch.goal.reshape(Fn, -1), None, "eval")
    res = {
        "bce": loss_traversability(out.trav, batch.traversability.reshape(Fn, *out.trav.shape[1:])).item(),
        "waypoint_error": waypoint_error(out.waypoints.data, batch.waypoints.reshape(Fn, -1, 2)),
    }
    if out.gate is not None:
        label = batch.stability.reshape(Fn) >= 0.5
        res["gate_accuracy"] = float(np.mean((out.gate.g.data > 0.5) == label))
    return res
