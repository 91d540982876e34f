import csv
import dataclasses
import json
import math
import re

import numpy as np
import pytest

from focusnav.cli import main
from focusnav.pipeline import train as train_mod
from focusnav.pipeline.collect import DemoSetError, NoisyExpert, collect, load_demos, read_manifest
from focusnav.pipeline.config import ConfigError, RunConfig, derive_seed
from focusnav.pipeline.evaluate import evaluate, metrics_from_records
from focusnav.pipeline.render import attention_maps, render_record, render_world
from focusnav.pipeline.train import CheckpointMismatchError, TrainingError, load_model, train
from focusnav.sensors import read_pgm
from focusnav.world import EpisodeRecord, World, WorldConfig, mark_discs


def flat_cfg(seed=3):
    cfg = RunConfig.toy(seed)
    cfg.collect_scenarios = ("flat-static",)
    cfg.train.checkpoint_every = 2
    return cfg


@pytest.fixture(scope="module")
def demos(tmp_path_factory):
    out = tmp_path_factory.mktemp("demos")
    manifest = collect(flat_cfg(), out, episodes=10)
    return out, manifest


# -- config -------------------------------------------------------------------------

def test_config_json_round_trip(tmp_path):
    cfg = RunConfig.toy(7).with_variant("concat")
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    back = RunConfig.load(path)
    assert back == cfg
    assert back.data_hash() == cfg.data_hash() and back.model_hash() == cfg.model_hash()


def test_config_hashes_track_the_right_fields():
    a = RunConfig.toy(1)
    assert a.with_variant("concat").data_hash() == a.data_hash()
    assert a.with_variant("concat").model_hash() != a.model_hash()
    assert RunConfig.toy(2).data_hash() != a.data_hash()


def test_config_rejects_unknown_keys_and_values():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"preset": "toy", "bogus": 1})
    cfg = RunConfig.toy()
    cfg.eval_scenarios = ("moon-static",)
    with pytest.raises(ConfigError):
        cfg.validate()


def test_derived_seeds_are_distinct():
    seeds = {derive_seed(1, tag, i) for tag in (1, 2, 3) for i in range(50)}
    assert len(seeds) == 150


# -- collect ------------------------------------------------------------------------

def test_flat_static_collection_all_succeed(demos):
    out, manifest = demos
    assert manifest["count"] == 10 and manifest["outcomes"] == {"success": 10}
    records = [json.loads(l) for l in (out / "episodes.jsonl").read_text().splitlines()]
    assert len(records) == 10
    assert read_manifest(out)["config_hash"] == flat_cfg().data_hash()


def test_collection_is_byte_identical(tmp_path):
    cfg = flat_cfg(11)
    collect(cfg, tmp_path / "a", episodes=2)
    collect(cfg, tmp_path / "b", episodes=2)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_zero_episodes_gives_empty_set(tmp_path):
    manifest = collect(flat_cfg(), tmp_path, episodes=0)
    assert manifest["count"] == 0 and manifest["steps"] == 0
    assert len(load_demos(tmp_path, flat_cfg()).episodes) == 0


def test_demo_labels_are_clean_bounded_expert_actions(demos):
    cfg = flat_cfg()
    rows = [json.loads(l) for l in (demos[0] / "demos.jsonl").read_text().splitlines()]
    recs = [json.loads(l) for l in (demos[0] / "episodes.jsonl").read_text().splitlines()]
    labels = np.array([r["action"] for r in rows])
    bounds = cfg.episode.walker
    assert np.all(np.abs(labels[:, 2]) <= bounds.v_bounds[2] + 1e-12)
    executed = np.array([s["action"] for r in recs for s in r["steps"]])
    assert executed.shape == labels.shape
    # noise makes the executed action differ from the label almost everywhere
    assert np.mean(np.any(executed != labels, axis=1)) > 0.9


def test_noiseless_expert_executes_its_label():
    from focusnav.pipeline.collect import make_episode
    from focusnav.pipeline.rollout import run_episode
    cfg = flat_cfg()
    world, setup, seed = make_episode(cfg, "flat-static", 0, 0)
    expert = NoisyExpert((0.0, 0.0, 0.0), 0.5, cfg.episode.walker, np.random.default_rng(0))
    labels = []
    rec = run_episode(world, setup, expert, cfg.episode, seed,
                      lambda k, s, c, a: labels.append(expert.label.as_array().tolist()) or {})
    assert [s["action"] for s in rec.steps] == labels


def test_collect_noise_is_validated():
    cfg = RunConfig.toy()
    cfg.collect_noise_corr = 1.0
    with pytest.raises(ConfigError):
        cfg.validate()


def test_demo_set_refuses_other_config(demos):
    with pytest.raises(DemoSetError):
        load_demos(demos[0], flat_cfg(seed=4))


# -- train --------------------------------------------------------------------------

def test_training_writes_loss_csv(demos, tmp_path):
    summary = train(flat_cfg(), demos[0], tmp_path, steps=3)
    with open(tmp_path / "losses.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "L_bc", "L_t", "L_p", "L_g", "total"]
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 3]
    assert all(math.isfinite(float(v)) for r in rows[1:] for v in r)
    assert summary["steps"] == 3
    assert (tmp_path / "final.fnv").exists() and (tmp_path / "best.fnv").exists()


def test_resume_is_bit_identical(demos, tmp_path):
    cfg = flat_cfg()
    train(cfg, demos[0], tmp_path / "straight", steps=4)
    train(cfg, demos[0], tmp_path / "split", steps=2)
    train(cfg, demos[0], tmp_path / "split", steps=4, resume=tmp_path / "split" / "final")
    assert (tmp_path / "straight" / "final.fnv").read_bytes() == (tmp_path / "split" / "final.fnv").read_bytes()
    assert (tmp_path / "straight" / "losses.csv").read_text() == (tmp_path / "split" / "losses.csv").read_text()


def test_non_finite_loss_aborts_with_diagnostics(demos, tmp_path, monkeypatch):
    real = train_mod.loss_total

    def poisoned(*args, **kwargs):
        loss, parts = real(*args, **kwargs)
        return loss, {**parts, "L_t": float("nan")}

    monkeypatch.setattr(train_mod, "loss_total", poisoned)
    with pytest.raises(TrainingError):
        train(flat_cfg(), demos[0], tmp_path, steps=2)
    diag = json.loads((tmp_path / "diagnostics.json").read_text())
    assert diag["step"] == 1 and "non-finite" in diag["error"]


def test_checkpoint_refuses_other_network(demos, tmp_path):
    train(flat_cfg(), demos[0], tmp_path, steps=1)
    other = flat_cfg()
    other.net = dataclasses.replace(other.net, dim=16, heads=2)
    with pytest.raises(CheckpointMismatchError):
        load_model(tmp_path / "final", other)
    model, _ = load_model(tmp_path / "final", flat_cfg())
    assert model.cfg.variant == "focusnav"


def test_short_episodes_cannot_fill_a_window(demos, tmp_path):
    cfg = flat_cfg()
    cfg.train.window = 10_000
    with pytest.raises(TrainingError):
        train(cfg, demos[0], tmp_path, steps=1)


# -- evaluate -----------------------------------------------------------------------

def test_metrics_recomputed_from_records_match(tmp_path):
    cfg = RunConfig.toy(5)
    summary = evaluate(cfg, None, tmp_path, episodes=4, scenarios=["flat-static", "unstructured-static"], seeds=2)
    for scen, res in summary["scenarios"].items():
        assert metrics_from_records(tmp_path / scen).to_dict() == res["metrics"]


def test_untrained_policy_rarely_arrives(demos, tmp_path):
    cfg = flat_cfg()
    from focusnav.attention_policy import FocusNavModel
    model = FocusNavModel(cfg.net, np.random.default_rng(0))
    summary = evaluate(cfg, model, None, episodes=3, scenarios=["flat-static"], seeds=1)
    assert summary["scenarios"]["flat-static"]["metrics"]["success"] == 0.0


# -- render -------------------------------------------------------------------------

def test_constant_gate_draws_a_flat_line(tmp_path):
    steps = [{"t": 0.1 * k, "stability": 0.9, "gate": 1.0, "state": [0.0] * 6} for k in range(20)]
    rec = EpisodeRecord(0, "success", 2.0, 0.1, steps)
    files = render_record(rec, tmp_path)
    svg = (tmp_path / "episode_gate.svg").read_text()
    assert tmp_path / "episode_gate.svg" in files
    pts = re.search(r'data-series="g"[^>]*points="([^"]+)"', svg).group(1).split()
    ys = {p.split(",")[1] for p in pts}
    assert len(pts) == 20 and len(ys) == 1
    # 1.0 is the top of the fixed (0, 1) axis: 360 px tall, 30 px top margin
    assert float(ys.pop()) == 30.0


def test_pillar_footprints_are_dark(tmp_path):
    n, res = 100, 0.1
    trav = np.ones((n, n), np.uint8)
    pillars = np.array([[3.05, 6.05, 0.4], [7.05, 2.05, 0.3]])
    mark_discs(trav, pillars, res)
    world = World(WorldConfig(arena_size=10.0, resolution=res), np.zeros((n, n)), trav, ["flat"], pillars, [])
    render_world(world, tmp_path)
    img = read_pgm(tmp_path / "traversability.pgm")
    assert img.shape == (n, n)
    for x, y, r in pillars:
        i, j = int(x / res), int(y / res)
        assert img[n - 1 - j, i] == 0  # +y up, +x right
    assert (img == 255).mean() > 0.9


def test_attention_maps_peak_at_255():
    w = np.random.default_rng(0).dirichlet(np.ones(16), size=3)
    maps = attention_maps(w, 4)
    assert len(maps) == 3
    for m, row in zip(maps, w):
        assert m.max() == pytest.approx(255.0, abs=1e-9)
        np.testing.assert_allclose(m.reshape(-1) / 255.0, row / row.max(), atol=1e-12)


# -- command line -------------------------------------------------------------------

def test_cli_collect_and_render(tmp_path, capsys):
    assert main(["collect", "--out", str(tmp_path / "d"), "--episodes", "0", "--seed", "2"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["count"] == 0 and out["seed"] == 2
    assert main(["gen-world", "--out", str(tmp_path / "w"), "--seed", "2"]) == 0
    assert (tmp_path / "w" / "traversability.pgm").exists() and (tmp_path / "w" / "terrain.obj").exists()


@pytest.mark.parametrize("argv, code", [
    (["train", "--out", "x"], 2),
    (["eval", "--out", "x", "--checkpoint", "does/not/exist"], 1),
    (["collect", "--out", "x", "--config", "missing.json"], 1),
    (["render", "--out", "x"], 2),
    (["fly", "--out", "x"], 2),
])
def test_cli_errors_are_json(tmp_path, capsys, monkeypatch, argv, code):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == code
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert set(err) == {"error", "message"}
