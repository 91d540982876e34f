"""Waypoint-guided cross-attention, stability-aware gating, and the recurrent policy.

``FocusNavModel`` wires perception, waypoint prediction, attention, gating,
and the GRU policy into one differentiable graph with four variants:

* ``focusnav``   waypoint queries + learned gate
* ``wgsca-only`` waypoint queries, gate forced open
* ``pgca``       a single proprioceptive query instead of waypoint queries
* ``concat``     mean-pooled BEV tokens, no attention
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Tensor
from .autodiff.tensor import as_tensor
from .autodiff.functional import gumbel_softmax, sinusoidal_pe
from .perception import (
    BevEncoder,
    GridSpec,
    PatchEmbed,
    TraversabilityDecoder,
    VoxelBatch,
    loss_traversability,
    patch_centers,
)
from .planner.predictor import WaypointPredictor, loss_waypoints
from .world import stability_metric  # noqa: F401  (re-exported for callers of this module)

VARIANTS = ("focusnav", "wgsca-only", "pgca", "concat")
PROB_CLAMP = 1e-7


class MissingLabelError(KeyError):
    pass


@dataclass
class NetConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    vfe_hidden: int = 16
    vfe_channels: int = 16
    bev_channels: int = 32
    dim: int = 64
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    n_waypoints: int = 5
    patch: int = 8
    gate_hidden: int = 32
    gru_hidden: int = 128
    proprio_dim: int = 15
    goal_dim: int = 3
    action_scale: tuple[float, float, float] = (1.0, 0.4, 1.2)
    tau: float = 1.0
    variant: str = "focusnav"

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.grid.size % self.patch:
            raise ValueError("grid size must be divisible by the patch size")
        if self.dim % 4 or self.dim % self.heads:
            raise ValueError("dim must be divisible by 4 and by the head count")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    @property
    def tokens(self) -> int:
        return (self.grid.size // self.patch) ** 2


# -- closed-form pieces --------------------------------------------------------

def hybrid(m: Tensor, g) -> Tensor:
    """m_1 + g·Σ_{k≥2} m_k for m (B, N, d) and g (B,); g may be a Tensor, an array or a scalar.

    Rows with g == 0 return m_1 itself, so they never depend on m_{2..N}.
    """
    B, N, d = m.shape
    m1 = ad.getitem(m, (slice(None), 0))
    if N == 1:
        return m1
    rest = ad.sum_(ad.getitem(m, (slice(None), slice(1, None))), axis=1)
    gt = g if isinstance(g, Tensor) else Tensor(np.broadcast_to(np.asarray(g, dtype=np.float64), (B,)).copy())
    gv = gt.data.reshape(B, 1)
    out = np.where(gv == 0.0, m1.data, m1.data + gv * rest.data)

    def backward(grad):
        return grad, grad * gv, (grad * rest.data).sum(axis=1)

    return Tensor._make(out, (m1, rest, gt), backward)


def loss_gate(p1, p0, s_m) -> Tensor:
    """−mean[S_m·log p_1 + (1−S_m)·log p_0] with probabilities clamped at 1e-7."""
    p1, p0 = as_tensor(p1), as_tensor(p0)
    s = np.asarray(s_m, dtype=np.float64)
    l1 = ad.log(ad.clip(p1, PROB_CLAMP, 1.0))
    l0 = ad.log(ad.clip(p0, PROB_CLAMP, 1.0))
    return -ad.mean(Tensor(s) * l1 + Tensor(1.0 - s) * l0)


@dataclass
class GateState:
    logits: Tensor  # (B, 2): (activation, deactivation)
    p1: Tensor
    p0: Tensor
    g: Tensor  # (B,) in {0, 1}
    tau: float


class Gate(Module):
    def __init__(self, proprio_dim: int, hidden: int, rng: np.random.Generator):
        self.mlp = ad.MLP(proprio_dim, hidden, 2, rng)

    def __call__(self, s_p: np.ndarray, tau: float, rng: np.random.Generator | None, mode: str = "eval") -> GateState:
        if tau <= 0:
            raise ValueError("tau must be positive")
        logits = self.mlp(as_tensor(s_p))
        return gate_from_logits(logits, tau, rng, mode)


def gate_from_logits(logits: Tensor, tau: float, rng: np.random.Generator | None, mode: str) -> GateState:
    probs = ad.softmax(logits, axis=-1)
    p1, p0 = ad.getitem(probs, (Ellipsis, 0)), ad.getitem(probs, (Ellipsis, 1))
    if mode == "train":
        sample = gumbel_softmax(logits, tau, hard=True, rng=rng)
        g = ad.getitem(sample, (Ellipsis, 0))
    elif mode == "soft":
        g = p1  # deterministic relaxed path used by gradient checks
    elif mode == "eval":
        g = Tensor((logits.data[..., 0] >= logits.data[..., 1]).astype(np.float64))
    else:
        raise ValueError(f"unknown gate mode {mode!r}")
    return GateState(logits, p1, p0, g, tau)


class WGSCA(Module):
    """Waypoint queries attend over BEV patch tokens (one multi-head layer)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.attn = ad.MultiHeadAttention(dim, heads, rng)

    def __call__(self, latents: Tensor, waypoints: Tensor, tokens: Tensor, centers: np.ndarray) -> tuple[Tensor, Tensor]:
        dim = latents.shape[-1]
        query = latents + sinusoidal_pe(waypoints, dim)
        key = tokens + Tensor(sinusoidal_pe(centers, dim).data[None])
        return self.attn(query, key, tokens)


def wgsca(latents: Tensor, waypoints: Tensor, tokens: Tensor, centers: np.ndarray, module: WGSCA) -> tuple[Tensor, Tensor]:
    return module(latents, waypoints, tokens, centers)


class Policy(Module):
    """GRU over concat(m^h, S_p) with a tanh-bounded action head."""

    def __init__(self, dim: int, proprio_dim: int, hidden: int, scale, rng: np.random.Generator):
        self.gru = ad.GRUCell(dim + proprio_dim, hidden, rng)
        self.head = ad.Linear(hidden, 3, rng)
        self.scale = np.asarray(scale, dtype=np.float64)

    def __call__(self, m_h: Tensor, s_p, h: Tensor) -> tuple[Tensor, Tensor]:
        x = ad.concat([m_h, as_tensor(s_p)], axis=-1)
        h_next = self.gru(x, h)
        return ad.tanh(self.head(h_next)) * Tensor(self.scale), h_next


def policy_step(m_h: Tensor, s_p, h: Tensor, policy: Policy) -> tuple[Tensor, Tensor]:
    return policy(m_h, s_p, h)


# -- full model ------------------------------------------------------------------

@dataclass
class FrameOutputs:
    trav: Tensor  # (F, H, W) probabilities
    waypoints: Tensor  # (F, N, 2)
    latents: Tensor  # (F, N, d)
    m_h: Tensor  # (F, d)
    gate: GateState | None
    attention: Tensor | None  # (F, heads, Nq, T)


@dataclass
class TrainBatch:
    """B windows of T steps; frame arrays are flattened window-major (F = B·T)."""

    voxels: VoxelBatch
    proprio: np.ndarray  # (B, T, 15)
    goal: np.ndarray  # (B, T, 3)
    waypoints: np.ndarray | None = None  # (B, T, N, 2)
    actions: np.ndarray | None = None  # (B, T, 3)
    traversability: np.ndarray | None = None  # (B, T, H, W)
    stability: np.ndarray | None = None  # (B, T)

    @property
    def shape(self) -> tuple[int, int]:
        return self.proprio.shape[:2]


@dataclass
class LossWeights:
    traversability: float = 1.0
    waypoints: float = 1.0
    gate: float = 0.5
    reg: float = 0.1


class FocusNavModel(Module):
    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        g = cfg.grid
        self.encoder = BevEncoder(g, cfg.vfe_hidden, cfg.vfe_channels, cfg.bev_channels, rng)
        self.trav_decoder = TraversabilityDecoder(cfg.bev_channels, rng)
        self.patch_embed = PatchEmbed(cfg.bev_channels, cfg.patch, cfg.dim, rng)
        self.planner = WaypointPredictor(cfg.dim, cfg.heads, cfg.enc_layers, cfg.dec_layers, cfg.n_waypoints,
                                         cfg.proprio_dim, cfg.goal_dim, g.extent, rng)
        self.f_enc = ad.MLP(2, cfg.dim, cfg.dim, rng)
        if cfg.variant in ("focusnav", "wgsca-only"):
            self.wgsca = WGSCA(cfg.dim, cfg.heads, rng)
        if cfg.variant == "focusnav":
            self.gate = Gate(cfg.proprio_dim, cfg.gate_hidden, rng)
        if cfg.variant == "pgca":
            self.query = ad.Linear(cfg.proprio_dim, cfg.dim, rng)
            self.pgca = ad.MultiHeadAttention(cfg.dim, cfg.heads, rng)
        if cfg.variant == "concat":
            self.pool = ad.Linear(cfg.dim, cfg.dim, rng)
        self.policy = Policy(cfg.dim, cfg.proprio_dim, cfg.gru_hidden, cfg.action_scale, rng)
        self.centers = patch_centers(g, cfg.patch)

    def frames(self, voxels: VoxelBatch, s_p: np.ndarray, g_n: np.ndarray, teacher: np.ndarray | None = None,
               gate_mode: str = "eval", rng: np.random.Generator | None = None) -> FrameOutputs:
        """Per-frame perception, waypoints, attention, and hybrid embedding."""
        cfg = self.cfg
        bev = self.encoder(voxels)
        trav = self.trav_decoder(bev)
        tokens = self.patch_embed(bev)
        pred = self.planner(tokens, self.centers, s_p, g_n, teacher)
        gate = None
        attn = None
        if cfg.variant in ("focusnav", "wgsca-only"):
            m, attn = self.wgsca(pred.latents, pred.waypoints, tokens, self.centers)
            if cfg.variant == "focusnav":
                gate = self.gate(s_p, cfg.tau, rng, gate_mode)
                m_h = hybrid(m, gate.g)
            else:
                m_h = hybrid(m, 1.0)
        elif cfg.variant == "pgca":
            key = tokens + Tensor(sinusoidal_pe(self.centers, cfg.dim).data[None])
            q = ad.reshape(self.query(Tensor(s_p)), (s_p.shape[0], 1, cfg.dim))
            out, attn = self.pgca(q, key, tokens)
            m_h = ad.reshape(out, (s_p.shape[0], cfg.dim))
        else:
            m_h = self.pool(ad.mean(tokens, axis=1))
        return FrameOutputs(trav, pred.waypoints, pred.latents, m_h, gate, attn)

    def unroll(self, m_h: Tensor, s_p: np.ndarray, h0: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """Run the GRU over windows: m_h (B, T, d), s_p (B, T, 15) → actions (B, T, 3)."""
        B, T, _ = m_h.shape
        h = h0 if h0 is not None else Tensor(np.zeros((B, self.cfg.gru_hidden)))
        acts = []
        for t in range(T):
            a, h = self.policy(ad.getitem(m_h, (slice(None), t)), s_p[:, t], h)
            acts.append(a)
        return ad.stack(acts, axis=1), h


def loss_total(model: FocusNavModel, batch: TrainBatch, weights: LossWeights, rng: np.random.Generator | None = None,
               gate_mode: str = "train") -> tuple[Tensor, dict]:
    """L_bc + λ1·L_t + λ2·L_p + λ3·L_g over a batch of windows; returns (loss, components)."""
    for name in ("waypoints", "actions", "traversability", "stability"):
        if getattr(batch, name) is None:
            raise MissingLabelError(f"batch is missing the {name!r} label")
    B, T = batch.shape
    Fn = B * T
    flat = lambda a: np.asarray(a).reshape((Fn,) + np.asarray(a).shape[2:])
    s_p = flat(batch.proprio)
    out = model.frames(batch.voxels, s_p, flat(batch.goal), flat(batch.waypoints), gate_mode, rng)
    actions, _ = model.unroll(ad.reshape(out.m_h, (B, T, -1)), batch.proprio)
    l_bc = ad.mean(ad.sum_(ad.square(actions - Tensor(batch.actions)), axis=-1))
    l_t = loss_traversability(out.trav, flat(batch.traversability))
    l_p = loss_waypoints(out.waypoints, out.latents, flat(batch.waypoints), model.f_enc, weights.reg)
    total = l_bc
    if weights.traversability:
        total = total + weights.traversability * l_t
    if weights.waypoints:
        total = total + weights.waypoints * l_p
    l_g = Tensor(0.0)
    if out.gate is not None:
        l_g = loss_gate(out.gate.p1, out.gate.p0, flat(batch.stability))
        if weights.gate:
            total = total + weights.gate * l_g
    parts = {"L_bc": l_bc.item(), "L_t": l_t.item(), "L_p": l_p.item(), "L_g": l_g.item(), "total": total.item()}
    return total, parts


class PolicyRunner:
    """Stateful closed-loop inference: hidden state persists until ``reset``."""

    def __init__(self, model: FocusNavModel):
        self.model = model
        self.h = None

    def reset(self):
        self.h = Tensor(np.zeros((1, self.model.cfg.gru_hidden)))

    def step(self, voxels: VoxelBatch, s_p: np.ndarray, g_n: np.ndarray) -> tuple[np.ndarray, dict]:
        if self.h is None:
            self.reset()
        with ad.no_grad():
            out = self.model.frames(voxels, s_p[None], g_n[None], None, "eval")
            a, self.h = self.model.policy(out.m_h, s_p[None], self.h)
        info = {"waypoints": out.waypoints.data[0].tolist()}
        if out.gate is not None:
            info["gate"] = float(out.gate.g.data[0])
            info["p1"] = float(out.gate.p1.data[0])
        if out.attention is not None:
            info["attention"] = out.attention.data[0].mean(axis=0)
        return a.data[0], info
