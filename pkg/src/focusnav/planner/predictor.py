"""Goal-conditioned waypoint predictor that decodes from the goal back to the robot.

Decoder slot 0 holds the goal token and emits the waypoint nearest the goal
(q_N); slot j holds the embedding of the waypoint emitted at slot j-1 and
emits q_{N-j}. A causal mask keeps every slot blind to later slots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Module, Parameter, Tensor
from ..autodiff.functional import causal_mask, sinusoidal_pe


@dataclass
class PredictorOutput:
    waypoints: Tensor  # (B, N, 2), k = 1 (nearest robot) ... N (nearest goal)
    latents: Tensor  # (B, N, d), aligned with waypoints
    memory: Tensor  # (B, T + 1, d) encoder output


class WaypointPredictor(Module):
    def __init__(self, dim: int, heads: int, enc_layers: int, dec_layers: int, n_waypoints: int,
                 proprio_dim: int, goal_dim: int, extent: float, rng: np.random.Generator):
        self.n = n_waypoints
        self.extent = extent
        self.proprio_token = ad.Linear(proprio_dim, dim, rng)
        self.encoder = [ad.EncoderLayer(dim, heads, rng) for _ in range(enc_layers)]
        self.goal_token = ad.Linear(goal_dim, dim, rng)
        self.wp_embed = ad.Linear(2, dim, rng)
        self.slot_embed = Parameter(rng.normal(0.0, 0.02, size=(n_waypoints, dim)))
        self.decoder = [ad.DecoderLayer(dim, heads, rng) for _ in range(dec_layers)]
        self.out_norm = ad.LayerNorm(dim)
        self.head = ad.Linear(dim, 2, rng)

    def encode(self, tokens: Tensor, centers: np.ndarray, s_p: np.ndarray) -> Tensor:
        """BEV patch tokens (+ position code) followed by one proprioceptive token."""
        dim = tokens.shape[-1]
        x = tokens + Tensor(sinusoidal_pe(centers, dim).data[None])
        sp = ad.reshape(self.proprio_token(Tensor(s_p)), (tokens.shape[0], 1, dim))
        x = ad.concat([x, sp], axis=1)
        for layer in self.encoder:
            x = layer(x)
        return x

    def decoder_inputs(self, g_n: np.ndarray, emitted: Tensor | None) -> Tensor:
        """Slot inputs: goal token, then embeddings of already emitted waypoints (goal-first order)."""
        B = g_n.shape[0]
        goal = ad.reshape(self.goal_token(Tensor(g_n)), (B, 1, -1))
        parts = [goal] if emitted is None or emitted.shape[1] == 0 else [goal, self.wp_embed(emitted)]
        return ad.concat(parts, axis=1)

    def decode(self, inputs: Tensor, memory: Tensor) -> Tensor:
        """Hidden states for every slot (B, L, d); slot order is emission order."""
        L = inputs.shape[1]
        x = inputs + ad.getitem(self.slot_embed, slice(0, L))
        mask = causal_mask(L)
        for layer in self.decoder:
            x = layer(x, memory, mask)
        return self.out_norm(x)

    def _emit(self, hidden: Tensor) -> Tensor:
        half = self.extent / 2
        return ad.clip(self.head(hidden), -half, half)

    def __call__(self, tokens: Tensor, centers: np.ndarray, s_p: np.ndarray, g_n: np.ndarray,
                 teacher: np.ndarray | None = None) -> PredictorOutput:
        """With ``teacher`` (B, N, 2) ground-truth waypoints, decode with teacher forcing."""
        memory = self.encode(tokens, centers, s_p)
        if teacher is not None:
            goal_first = np.ascontiguousarray(np.asarray(teacher)[:, ::-1][:, : self.n - 1])
            hidden = self.decode(self.decoder_inputs(g_n, Tensor(goal_first)), memory)
            q = self._emit(hidden)
        else:
            emitted = None
            for _ in range(self.n):
                hidden = self.decode(self.decoder_inputs(g_n, emitted), memory)
                q = self._emit(hidden)
                emitted = q
        rev = np.arange(self.n)[::-1].copy()
        return PredictorOutput(ad.getitem(q, (slice(None), rev)), ad.getitem(hidden, (slice(None), rev)), memory)


def loss_waypoints(pred: Tensor, latents: Tensor, truth: np.ndarray, f_enc: Module, lambda_reg: float) -> Tensor:
    """Σ_k ‖q̂_k − q_k‖² + λ_reg Σ_k ‖x̂_k − f_enc(q_k)‖², averaged over the batch."""
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or latents.shape[:2] != truth.shape[:2]:
        raise ad.ShapeError("loss_waypoints", pred.shape, latents.shape, truth.shape)
    B = truth.shape[0]
    recon = ad.sum_(ad.square(pred - Tensor(truth))) / B
    if lambda_reg == 0:
        return recon
    target = f_enc(Tensor(truth))
    return recon + lambda_reg * ad.sum_(ad.square(latents - target)) / B


def waypoint_error(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean Euclidean distance between predicted and true waypoints (m)."""
    return float(np.linalg.norm(np.asarray(pred) - np.asarray(truth), axis=-1).mean())
