"""Command-line entry point: gen-world, collect, train, eval, render."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .attention_policy import VARIANTS, FocusNavModel
from .geometry import heightfield_mesh, write_obj
from .world import EpisodeRecord, generate_world


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="RunConfig JSON (defaults to the toy preset)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--episodes", type=int, help="override the episode count")
    p.add_argument("--variant", choices=VARIANTS, help="network variant")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="focusnav", description="Desk-scale humanoid local navigation pipeline")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("gen-world", help="generate one world and dump its maps")
    _common(p)
    p.add_argument("--scenario", default="unstructured-static")
    p = sub.add_parser("collect", help="collect expert demonstrations")
    _common(p)
    p = sub.add_parser("train", help="behaviour-clone a policy from demonstrations")
    _common(p)
    p.add_argument("--demos", type=Path, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p = sub.add_parser("eval", help="closed-loop evaluation over the scenario grid")
    _common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--expert", action="store_true", help="evaluate the privileged expert")
    src.add_argument("--untrained", action="store_true", help="evaluate a freshly initialised network")
    p.add_argument("--seeds", type=int)
    p.add_argument("--scenarios", nargs="+")
    p = sub.add_parser("render", help="emit PGM heatmaps and SVG charts")
    _common(p)
    p.add_argument("--records", type=Path, help="records JSONL file")
    p.add_argument("--losses", type=Path, help="losses.csv from train")
    p.add_argument("--checkpoint", type=Path, help="checkpoint for traversability predictions")
    p.add_argument("--demos", type=Path, help="demo set for traversability truth/prediction")
    p.add_argument("--world", action="store_true", help="render a generated world's maps")
    return ap


def load_config(args):
    from .pipeline.config import RunConfig
    if args.config is not None:
        if not args.config.exists():
            raise FileNotFoundError(f"config not found: {args.config}")
        cfg = RunConfig.from_dict(json.loads(args.config.read_text()))
    else:
        cfg = RunConfig.toy()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.variant is not None:
        cfg.net.variant = args.variant
    cfg.validate()
    return cfg


def _log(msg: str):
    print(msg, file=sys.stderr, flush=True)


def cmd_gen_world(args) -> dict:
    cfg = load_config(args)
    world = generate_world(cfg.scenarios.world(cfg.world, args.scenario, cfg.seed))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "world.json").write_text(world.to_json() + "\n")
    write_obj(args.out / "terrain.obj", heightfield_mesh(world.elevation, world.resolution))
    from .pipeline.render import render_world
    files = render_world(world, args.out)
    return {"world": str(args.out / "world.json"), "files": [str(f) for f in files]}


def cmd_collect(args) -> dict:
    from .pipeline.collect import collect
    cfg = load_config(args)
    return collect(cfg, args.out, args.episodes, log=_log)


def cmd_train(args) -> dict:
    from .pipeline.train import train
    cfg = load_config(args)
    return train(cfg, args.demos, args.out, args.steps, args.resume, log=_log)


def cmd_eval(args) -> dict:
    from .pipeline.evaluate import evaluate
    from .pipeline.train import load_model
    cfg = load_config(args)
    model = None
    if args.checkpoint is not None:
        model, _ = load_model(args.checkpoint, cfg)
    elif args.untrained:
        model = FocusNavModel(cfg.net, np.random.default_rng(cfg.seed))
    return evaluate(cfg, model, args.out, args.episodes, args.scenarios, args.seeds, log=_log)


def cmd_render(args) -> dict:
    from .pipeline import render
    cfg = load_config(args)
    files = []
    if args.losses is not None:
        files += render.render_losses(args.losses, args.out)
    if args.records is not None:
        if not args.records.exists():
            raise FileNotFoundError(f"records not found: {args.records}")
        recs = [EpisodeRecord.from_json(l) for l in args.records.read_text().splitlines() if l]
        if not recs:
            raise FileNotFoundError(f"{args.records}: no records")
        files += render.render_record(recs[0], args.out, cfg.net.grid.size // cfg.net.patch)
        freq = render.truncation_map(recs, cfg.world.arena_size)
        path = args.out / "gate_truncation.pgm"
        render.write_pgm8(path, render.world_image(freq * 255.0))
        files.append(path)
    if args.checkpoint is not None or args.demos is not None:
        if args.checkpoint is None or args.demos is None:
            raise UsageError("traversability rendering needs both --checkpoint and --demos")
        from .pipeline.collect import load_demos
        from .pipeline.train import load_model
        model, _ = load_model(args.checkpoint, cfg)
        files += render.render_traversability(model, load_demos(args.demos), cfg, args.out)
    if args.world:
        files += render.render_world(generate_world(cfg.scenarios.world(cfg.world, "unstructured-static", cfg.seed)),
                                     args.out)
    if not files:
        raise UsageError("nothing to render: pass --losses, --records, --checkpoint/--demos, or --world")
    return {"files": [str(f) for f in files]}


COMMANDS = {"gen-world": cmd_gen_world, "collect": cmd_collect, "train": cmd_train,
            "eval": cmd_eval, "render": cmd_render}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        result = COMMANDS[args.command](args)
    except UsageError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # every failure surfaces as one JSON line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(result, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
