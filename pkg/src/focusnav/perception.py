"""Voxelization, voxel feature encoding, BEV extraction, and traversability decoding.

Robot-centric grids are yaw-aligned: index i runs along the robot's forward
axis, j along its left axis, and the robot sits at the grid centre.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Tensor

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class GridSpec:
    depth: int = 8
    size: int = 64
    cell: float = 0.1
    z_cell: float = 0.25
    z_min: float = -1.0
    max_points: int = 16

    @property
    def extent(self) -> float:
        return self.size * self.cell

    @property
    def xy_min(self) -> float:
        return -self.extent / 2

    def cell_centers(self) -> np.ndarray:
        """(size, size, 2) robot-frame centres of the horizontal cells."""
        c = self.xy_min + (np.arange(self.size) + 0.5) * self.cell
        return np.stack(np.meshgrid(c, c, indexing="ij"), axis=-1)


@dataclass
class VoxelGrid:
    spec: GridSpec
    coords: np.ndarray  # (V, 3) int: (iz, ix, iy), sorted by flat index
    features: np.ndarray  # (V, P, 4): offset from voxel centre (3) + absolute z
    mask: np.ndarray  # (V, P) bool
    counts: np.ndarray  # (V,) points binned before capping
    dropped: int

    @property
    def flat_index(self) -> np.ndarray:
        s = self.spec
        return (self.coords[:, 0] * s.size + self.coords[:, 1]) * s.size + self.coords[:, 2]

    def __len__(self):
        return len(self.coords)


def voxelize(points: np.ndarray, spec: GridSpec) -> VoxelGrid:
    """Bin robot-frame points; cap each voxel by deterministic stride subsampling."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    ix = np.floor((pts[:, 0] - spec.xy_min) / spec.cell).astype(np.int64)
    iy = np.floor((pts[:, 1] - spec.xy_min) / spec.cell).astype(np.int64)
    iz = np.floor((pts[:, 2] - spec.z_min) / spec.z_cell).astype(np.int64)
    inside = (ix >= 0) & (ix < spec.size) & (iy >= 0) & (iy < spec.size) & (iz >= 0) & (iz < spec.depth)
    dropped = int((~inside).sum())
    pts, ix, iy, iz = pts[inside], ix[inside], iy[inside], iz[inside]
    flat = (iz * spec.size + ix) * spec.size + iy
    order = np.argsort(flat, kind="stable")
    flat, pts = flat[order], pts[order]
    uniq, first, counts = np.unique(flat, return_index=True, return_counts=True)
    P = spec.max_points
    feats = np.zeros((len(uniq), P, 4))
    mask = np.zeros((len(uniq), P), dtype=bool)
    coords = np.stack([uniq // (spec.size * spec.size), (uniq // spec.size) % spec.size, uniq % spec.size], axis=1)
    centres = np.stack([spec.xy_min + (coords[:, 1] + 0.5) * spec.cell,
                        spec.xy_min + (coords[:, 2] + 0.5) * spec.cell,
                        spec.z_min + (coords[:, 0] + 0.5) * spec.z_cell], axis=1)
    take = np.minimum(counts, P)
    slot = np.arange(P)[None, :]
    valid = slot < take[:, None]
    # stride subsampling: slot k takes point floor(k * n / cap) of the voxel
    src = first[:, None] + (slot * counts[:, None]) // np.maximum(take[:, None], 1)
    src = np.where(valid, src, first[:, None])
    chosen = pts[src]
    feats[..., :3] = chosen - centres[:, None, :]
    feats[..., 3] = chosen[..., 2]
    feats[~valid] = 0.0
    mask[valid] = True
    return VoxelGrid(spec, coords, feats, mask, counts, dropped)


@dataclass
class VoxelBatch:
    """Capped points of several grids, flattened voxel by voxel."""

    spec: GridSpec
    points: np.ndarray  # (n, 4) per-point features
    starts: np.ndarray  # (Vtot,) first point row of each voxel
    flat_index: np.ndarray  # (Vtot,) into B·D·H·W
    batch: int


def collate(grids: list[VoxelGrid], spec: GridSpec | None = None) -> VoxelBatch:
    spec = spec or grids[0].spec
    cells = spec.depth * spec.size * spec.size
    feats = [g.features[g.mask] for g in grids]
    counts = np.concatenate([g.mask.sum(axis=1) for g in grids]) if grids else np.zeros(0, dtype=np.int64)
    flat = [g.flat_index + b * cells for b, g in enumerate(grids)]
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64) if len(counts) else np.zeros(0, np.int64)
    return VoxelBatch(spec, np.concatenate(feats) if feats else np.zeros((0, 4)), starts,
                      np.concatenate(flat) if flat else np.zeros(0, dtype=np.int64), len(grids))


class BevEncoder(Module):
    """VFE → conv3d → max over z → two-scale conv2d fusion."""

    def __init__(self, spec: GridSpec, vfe_hidden: int, vfe_channels: int, channels: int, rng: np.random.Generator):
        self.spec = spec
        self.vfe = ad.MLP(4, vfe_hidden, vfe_channels, rng)
        self.conv3d = ad.Conv3d(vfe_channels, vfe_channels, 3, rng)
        self.fine = ad.Conv2d(vfe_channels, channels, 3, rng)
        # coarse branch: dilated 3×3 sees the same 2× footprint as a stride-2/upsample
        # pair while staying exactly equivariant to one-cell shifts
        self.coarse = ad.Conv2d(channels, channels, 3, rng, dilation=2)
        self.channels = channels

    def __call__(self, vox: VoxelBatch) -> Tensor:
        s = self.spec
        B, D, H = vox.batch, s.depth, s.size
        c3 = self.vfe.fc2.weight.shape[1]
        if len(vox.starts):
            h = ad.relu(self.vfe(Tensor(vox.points)))
            per_voxel = ad.segment_max(h, vox.starts)
            dense = ad.scatter_rows(per_voxel, vox.flat_index, B * D * H * H)
        else:
            dense = Tensor(np.zeros((B * D * H * H, c3)))
        grid = ad.transpose(ad.reshape(dense, (B, D, H, H, c3)), (0, 4, 1, 2, 3))
        grid = ad.relu(self.conv3d(grid))
        bev = ad.max_over_axis(grid, axis=2)
        fine = ad.relu(self.fine(bev))
        return fine + ad.relu(self.coarse(fine))


class TraversabilityDecoder(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv = ad.Conv2d(channels, channels, 3, rng)
        self.head = ad.Conv2d(channels, 1, 1, rng)

    def logits(self, bev: Tensor) -> Tensor:
        out = self.head(ad.relu(self.conv(bev)))
        return ad.reshape(out, (out.shape[0], out.shape[2], out.shape[3]))

    def __call__(self, bev: Tensor) -> Tensor:
        """Probabilities (B, H_t, W_t)."""
        return ad.sigmoid(self.logits(bev))


def loss_traversability(pred: Tensor, truth: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ad.ShapeError("loss_traversability", pred.shape, truth.shape)
    p = ad.clip(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = Tensor(truth) * ad.log(p) + Tensor(1.0 - truth) * ad.log(1.0 - p)
    return -ad.mean(ll)


def patchify(bev: Tensor, patch: int) -> Tensor:
    """(B, C, H, W) → (B, (H/p)·(W/p), C·p·p) tokens, row-major over the patch grid."""
    B, C, H, W = bev.shape
    if H % patch or W % patch:
        raise ad.ShapeError("patchify", bev.shape, (patch, patch))
    gh, gw = H // patch, W // patch
    x = ad.reshape(bev, (B, C, gh, patch, gw, patch))
    x = ad.transpose(x, (0, 2, 4, 1, 3, 5))
    return ad.reshape(x, (B, gh * gw, C * patch * patch))


def patch_centers(spec: GridSpec, patch: int) -> np.ndarray:
    """Robot-frame metric centres of the patch tokens, same order as ``patchify``."""
    g = spec.size // patch
    c = spec.xy_min + (np.arange(g) + 0.5) * patch * spec.cell
    return np.stack(np.meshgrid(c, c, indexing="ij"), axis=-1).reshape(-1, 2)


class PatchEmbed(Module):
    def __init__(self, channels: int, patch: int, dim: int, rng: np.random.Generator):
        self.patch = patch
        self.proj = ad.Linear(channels * patch * patch, dim, rng)

    def __call__(self, bev: Tensor) -> Tensor:
        return self.proj(patchify(bev, self.patch))
