"""Convolution and pooling ops (channels-first, im2col based)."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, concat, getitem, reshape, transpose


_COMPUTE_DTYPE = np.float64


def set_conv_precision(dtype) -> None:
    """Internal dtype of convolution matmuls (float64 default; float32 for fast training)."""
    global _COMPUTE_DTYPE
    _COMPUTE_DTYPE = np.dtype(dtype).type


def _conv_raw(xp: np.ndarray, w: np.ndarray, stride: int, dilation: int) -> tuple[np.ndarray, np.ndarray]:
    """Valid N-d convolution of an already padded input.

    Returns (out, cols) with cols laid out (Cin·K, B·out_spatial), filled one
    kernel offset at a time so every copy runs along contiguous rows.
    """
    nd = w.ndim - 2
    B, cin = xp.shape[:2]
    cout = w.shape[0]
    k = w.shape[2:]
    s, d = stride, dilation
    out_sp = tuple((xp.shape[2 + i] - d * (k[i] - 1) - 1) // s + 1 for i in range(nd))
    xt = xp.swapaxes(0, 1)
    cols = np.empty((cin, int(np.prod(k)), B) + out_sp, dtype=_COMPUTE_DTYPE)
    for o, off in enumerate(np.ndindex(*k)):
        src = (slice(None), slice(None)) + tuple(slice(d * oi, d * oi + s * (n - 1) + 1, s) for oi, n in zip(off, out_sp))
        cols[:, o] = xt[src]
    cols = cols.reshape(cin * int(np.prod(k)), -1)
    out = w.reshape(cout, -1).astype(_COMPUTE_DTYPE, copy=False) @ cols
    return np.moveaxis(out.reshape((cout, B) + out_sp), 0, 1).astype(np.float64), cols


def _conv_nd(x: Tensor, w: Tensor, b: Tensor | None, stride: int, padding: int, dilation: int, name: str) -> Tensor:
    nd = w.ndim - 2
    p, s, d = padding, stride, dilation
    xp = np.pad(x.data, ((0, 0), (0, 0)) + ((p, p),) * nd) if p else x.data
    k = w.shape[2:]
    if any(xp.shape[2 + i] < d * (k[i] - 1) + 1 for i in range(nd)):
        raise ShapeError(name, x.shape, w.shape)
    out, cols = _conv_raw(xp, w.data, s, d)
    if b is not None:
        out = out + b.data.reshape((1, -1) + (1,) * nd)
    out_sp = out.shape[2:]
    cout, cin = w.shape[:2]

    def backward(g):
        gm = g.swapaxes(0, 1).reshape(cout, -1)
        gw = (gm.astype(cols.dtype) @ cols.T).reshape(w.shape).astype(np.float64)
        if s == 1 and all(p <= d * (kk - 1) for kk in k):
            # input gradient = full correlation of g with the flipped, transposed kernel
            wf = np.flip(w.data, axis=tuple(range(2, 2 + nd))).swapaxes(0, 1)
            q = tuple(d * (kk - 1) - p for kk in k)
            gp = np.pad(g, ((0, 0), (0, 0)) + tuple((qq, qq) for qq in q))
            gx = _conv_raw(gp, np.ascontiguousarray(wf), 1, d)[0]
        else:
            gcols = (w.data.reshape(cout, -1).T @ gm).reshape((cin,) + k + (g.shape[0],) + out_sp)
            gxp = np.zeros_like(xp)
            for off in np.ndindex(*k):
                dst = (slice(None), slice(None)) + tuple(
                    slice(d * o, d * o + s * (n - 1) + 1, s) for o, n in zip(off, out_sp))
                gxp[dst] += gcols[(slice(None),) + off].swapaxes(0, 1)
            gx = gxp[(slice(None), slice(None)) + tuple(slice(p, p + n) for n in x.shape[2:])] if p else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(gm.sum(axis=1))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, parents, backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0,
           dilation: int = 1) -> Tensor:
    """x: (B, Cin, H, W); w: (Cout, Cin, kh, kw); b: (Cout,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    return _conv_nd(x, w, b, stride, padding, dilation, "conv2d")


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 1) -> Tensor:
    """Stride-1 3-D convolution. x: (B, Cin, D, H, W); w: (Cout, Cin, k, k, k), k <= 3.

    Depth is folded into channels: a 2-D convolution with a depth-banded weight
    computes the same sums with a much smaller column matrix.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[1] or max(w.shape[2:]) > 3:
        raise ShapeError("conv3d", x.shape, w.shape)
    B, cin, D, H, W = x.shape
    cout, _, kz, ky, kx = w.shape
    d_out = D + 2 * padding - kz + 1
    if d_out < 1:
        raise ShapeError("conv3d", x.shape, w.shape)
    # band[o, i] = kernel depth tap linking output depth o to input depth i (kz = no link)
    band = np.full((d_out, D), kz)
    for o in range(d_out):
        for kk in range(kz):
            i = o - padding + kk
            if 0 <= i < D:
                band[o, i] = kk
    wz = concat([w, Tensor(np.zeros((cout, cin, 1, ky, kx)))], axis=2)
    w2 = getitem(wz, (slice(None), slice(None), band))  # (Cout, Cin, Do, D, ky, kx)
    w2 = reshape(transpose(w2, (0, 2, 1, 3, 4, 5)), (cout * d_out, cin * D, ky, kx))
    b2 = None if b is None else getitem(as_tensor(b), np.repeat(np.arange(cout), d_out))
    y = _conv_nd(reshape(x, (B, cin * D, H, W)), w2, b2, 1, padding, 1, "conv3d")
    return reshape(y, (B, cout, d_out) + y.shape[2:])


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k×k max pooling; H and W must be divisible by k."""
    B, C, H, W = x.shape
    if H % k or W % k:
        raise ShapeError("max_pool2d", x.shape, (k, k))
    blocks = x.data.reshape(B, C, H // k, k, W // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // k, W // k, k * k)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(B, C, H // k, W // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return Tensor._make(out, (x,), backward)


def upsample_nearest2d(x: Tensor, k: int = 2) -> Tensor:
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, k, axis=2), k, axis=3)
    return Tensor._make(out, (x,), lambda g: (g.reshape(B, C, H, k, W, k).sum(axis=(3, 5)),))
