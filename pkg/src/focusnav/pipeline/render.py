"""PGM heatmaps and SVG line charts; no plotting dependencies."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from ..world import EpisodeRecord, World

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def write_pgm8(path, img: np.ndarray):
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("PGM images are 2-D")
    data = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode() + data.tobytes())


def to_gray(a: np.ndarray, vmin: float | None = None, vmax: float | None = None) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    lo = np.nanmin(a) if vmin is None else vmin
    hi = np.nanmax(a) if vmax is None else vmax
    if hi <= lo:
        return np.zeros_like(a)
    return np.clip((a - lo) / (hi - lo), 0.0, 1.0) * 255.0


def world_image(a: np.ndarray) -> np.ndarray:
    """World grid indexed (x, y) → image with +y up and +x right."""
    return np.asarray(a).T[::-1]


def robot_image(a: np.ndarray) -> np.ndarray:
    """Robot grid indexed (forward, left) → image with forward up and the robot's left on the left."""
    return np.asarray(a)[::-1, ::-1]


def attention_maps(weights, grid: int) -> list[np.ndarray]:
    """Per-waypoint attention over patch tokens → (grid, grid) images scaled so each max is 255."""
    w = np.asarray(weights, dtype=np.float64)
    maps = []
    for row in w.reshape(w.shape[0], grid, grid):
        m = row.max()
        maps.append(row / m * 255.0 if m > 0 else np.zeros_like(row))
    return maps


def svg_chart(path, series: dict[str, tuple], title: str = "", ylim: tuple[float, float] | None = None,
              xlabel: str = "", ylabel: str = "", size=(640, 360)):
    """Line chart with one polyline per named (x, y) series."""
    W, H = size
    L, R, T, B = 60, 20, 30, 40
    xs = np.concatenate([np.asarray(x, dtype=np.float64) for x, _ in series.values()]) if series else np.zeros(1)
    ys = np.concatenate([np.asarray(y, dtype=np.float64) for _, y in series.values()]) if series else np.zeros(1)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = ylim if ylim else (float(np.nanmin(ys)), float(np.nanmax(ys)))
    if x1 <= x0:
        x1 = x0 + 1.0
    if y1 <= y0:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def px(x):
        return L + (x - x0) / (x1 - x0) * (W - L - R)

    def py(y):
        return H - B - (y - y0) / (y1 - y0) * (H - T - B)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
             f'<rect width="{W}" height="{H}" fill="white"/>',
             f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
             f'<line x1="{L}" y1="{H - B}" x2="{W - R}" y2="{H - B}" stroke="black"/>',
             f'<line x1="{L}" y1="{T}" x2="{L}" y2="{H - B}" stroke="black"/>',
             f'<text x="{L - 6}" y="{py(y0) + 4:.1f}" text-anchor="end" font-size="10">{y0:.3g}</text>',
             f'<text x="{L - 6}" y="{py(y1) + 4:.1f}" text-anchor="end" font-size="10">{y1:.3g}</text>',
             f'<text x="{L}" y="{H - B + 14}" font-size="10">{x0:.3g}</text>',
             f'<text x="{W - R}" y="{H - B + 14}" text-anchor="end" font-size="10">{x1:.3g}</text>',
             f'<text x="{W / 2}" y="{H - 6}" text-anchor="middle" font-size="11">{escape(xlabel)}</text>',
             f'<text x="14" y="{H / 2}" font-size="11" transform="rotate(-90 14 {H / 2})" '
             f'text-anchor="middle">{escape(ylabel)}</text>']
    for k, (name, (x, y)) in enumerate(series.items()):
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y) if math.isfinite(b))
        color = PALETTE[k % len(PALETTE)]
        parts.append(f'<polyline data-series="{escape(name)}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{W - R - 4}" y="{T + 14 * (k + 1)}" text-anchor="end" font-size="11" '
                     f'fill="{color}">{escape(name)}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


# -- artefact renderers ------------------------------------------------------------

def render_losses(csv_path, out) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise FileNotFoundError(f"{csv_path}: no loss rows")
    step = [float(r["step"]) for r in rows]
    series = {k: (step, [float(r[k]) for r in rows]) for k in ("L_bc", "L_t", "L_p", "L_g", "total")}
    path = out / "loss_curves.svg"
    svg_chart(path, series, "training losses", xlabel="step", ylabel="loss")
    return [path]


def render_record(rec: EpisodeRecord, out, tokens_grid: int | None = None, prefix: str = "episode") -> list[Path]:
    """Gate and stability traces, plus per-waypoint attention heatmaps when logged."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t = [s["t"] for s in rec.steps]
    written = []
    path = out / f"{prefix}_stability.svg"
    svg_chart(path, {"S_m": (t, [s["stability"] for s in rec.steps])}, "stability", (0.0, 1.0), "time (s)", "S_m")
    written.append(path)
    if rec.steps and "gate" in rec.steps[0]:
        path = out / f"{prefix}_gate.svg"
        series = {"g": (t, [s["gate"] for s in rec.steps])}
        if "p1" in rec.steps[0]:
            series["p1"] = (t, [s["p1"] for s in rec.steps])
        svg_chart(path, series, "gate", (0.0, 1.0), "time (s)", "gate")
        written.append(path)
    att = [s["attention"] for s in rec.steps if "attention" in s]
    if att:
        a = np.asarray(att[len(att) // 2])
        grid = tokens_grid or int(round(math.sqrt(a.shape[1])))
        for k, img in enumerate(attention_maps(a, grid)):
            path = out / f"{prefix}_attention_q{k + 1}.pgm"
            write_pgm8(path, robot_image(img))
            written.append(path)
    return written


def truncation_map(records: list[EpisodeRecord], arena: float, cell: float = 0.5) -> np.ndarray:
    """Fraction of gated steps (g = 0) among steps taken in each arena cell."""
    n = int(math.ceil(arena / cell))
    hits, total = np.zeros((n, n)), np.zeros((n, n))
    for r in records:
        for s in r.steps:
            if "gate" not in s:
                continue
            i, j = (min(max(int(v // cell), 0), n - 1) for v in s["state"][:2])
            total[i, j] += 1
            hits[i, j] += s["gate"] == 0.0
    return np.divide(hits, total, out=np.zeros_like(hits), where=total > 0)


def render_world(world: World, out) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    p1, p2 = out / "traversability.pgm", out / "elevation.pgm"
    write_pgm8(p1, world_image(world.traversability_at(0.0) * 255.0))
    write_pgm8(p2, world_image(to_gray(world.elevation)))
    return [p1, p2]


def render_traversability(model, demos, cfg, out, episode: int = 0, step: int | None = None) -> list[Path]:
    """Ground-truth vs predicted robot-centric traversability for one demo frame."""
    from .. import autodiff as ad
    from ..perception import collate, voxelize

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ep = demos.episodes[episode]
    if not len(ep):
        raise FileNotFoundError(f"demo episode {episode} is empty")
    k = len(ep) // 2 if step is None else step
    with ad.no_grad():
        bev = model.encoder(collate([voxelize(ep.clouds[k], cfg.net.grid)], cfg.net.grid))
        pred = model.trav_decoder(bev).data[0]
    p1, p2 = out / "traversability_truth.pgm", out / "traversability_pred.pgm"
    write_pgm8(p1, robot_image(ep.traversability[k] * 255.0))
    write_pgm8(p2, robot_image(pred * 255.0))
    return [p1, p2]
