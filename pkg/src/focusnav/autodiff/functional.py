"""Composite ops: GRU cell, attention, position embedding, Gumbel-Softmax."""

from __future__ import annotations

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    cos,
    matmul,
    mul,
    reshape,
    sigmoid,
    sin,
    softmax,
    straight_through,
    tanh,
    transpose,
)


def gru_cell(x: Tensor, h: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """One GRU update. w_ih: (Din, 3H), w_hh: (H, 3H), gate order (reset, update, new)."""
    H = h.shape[-1]
    if w_ih.shape != (x.shape[-1], 3 * H) or w_hh.shape != (H, 3 * H):
        raise ShapeError("gru_cell", x.shape, h.shape, w_ih.shape, w_hh.shape)
    gi = matmul(x, w_ih) + b_ih
    gh = matmul(h, w_hh) + b_hh
    r = sigmoid(gi[..., :H] + gh[..., :H])
    z = sigmoid(gi[..., H:2 * H] + gh[..., H:2 * H])
    n = tanh(gi[..., 2 * H:] + r * gh[..., 2 * H:])
    return n + z * (h - n)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over the last two axes.

    ``mask`` is additive (0 or a large negative value) and broadcasts against
    the (..., Nq, Nk) score tensor. Returns (output, weights).
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError("attention", q.shape, k.shape, v.shape)
    scores = matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    scores = mul(scores, 1.0 / np.sqrt(q.shape[-1]))
    if mask is not None:
        scores = add(scores, Tensor(mask))
    w = softmax(scores, axis=-1)
    return matmul(w, v), w


def causal_mask(n: int) -> np.ndarray:
    m = np.zeros((n, n))
    m[np.triu_indices(n, 1)] = -1e30
    return m


def sinusoidal_pe(coords, dim: int, min_wavelength: float = 0.4, max_wavelength: float = 12.8) -> Tensor:
    """Embed metric (x, y) positions.

    Output layout per row: for x then y, ``dim // 4`` bands of (sin, cos)
    interleaved, so the origin maps to (0, 1, 0, 1, ...). Wavelengths are in
    metres and geometrically spaced.
    """
    if dim % 4:
        raise ValueError(f"sinusoidal_pe: dim must be divisible by 4, got {dim}")
    coords = as_tensor(coords)
    if coords.shape[-1] != 2:
        raise ShapeError("sinusoidal_pe", coords.shape)
    bands = dim // 4
    lam = min_wavelength * (max_wavelength / min_wavelength) ** (np.arange(bands) / max(bands - 1, 1))
    omega = 2.0 * np.pi / lam
    parts = []
    for axis in range(2):
        phase = mul(coords[..., axis:axis + 1], omega)  # (..., bands)
        s, c = sin(phase), cos(phase)
        inter = concat([reshape(s, s.shape + (1,)), reshape(c, c.shape + (1,))], axis=-1)
        parts.append(reshape(inter, s.shape[:-1] + (2 * bands,)))
    return concat(parts, axis=-1)


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, 1e-300, 1.0 - 1e-16)
    return -np.log(-np.log(u))


def gumbel_softmax(logits: Tensor, tau: float, hard: bool, rng: np.random.Generator) -> Tensor:
    """Relaxed categorical sample over the last axis.

    Hard mode returns an exact one-hot in the forward pass and routes the
    gradient through the soft sample (straight-through).
    """
    if tau <= 0:
        raise ValueError("gumbel_softmax: tau must be positive")
    logits = as_tensor(logits)
    noise = sample_gumbel(logits.shape, rng)
    soft = softmax(mul(add(logits, Tensor(noise)), 1.0 / tau), axis=-1)
    if not hard:
        return soft
    idx = soft.data.argmax(axis=-1)
    onehot = np.zeros_like(soft.data)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    return straight_through(onehot, soft)
