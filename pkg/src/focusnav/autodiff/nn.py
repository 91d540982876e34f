"""Parameter containers and the small layer set used by the networks."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import conv as C
from . import functional as F
from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Ordered tree of named parameters.

    Attributes that are Parameters, Modules, or lists of Modules are
    discovered in assignment order, so names are stable across runs.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name, p in self.named_parameters():
            if name in out:
                raise KeyError(f"duplicate parameter name {name}")
            out[name] = p.data
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        params = dict(self.named_parameters())
        if strict:
            missing = set(params) - set(state)
            if missing:
                raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            if name in state:
                arr = np.asarray(state[name], dtype=np.float64)
                if arr.shape != p.shape:
                    raise T.ShapeError(f"load_state_dict[{name}]", arr.shape, p.shape)
                p.data = arr.copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(_uniform(rng, din, (din, dout)))
        self.bias = Parameter(np.zeros(dout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise T.ShapeError("linear", x.shape, self.weight.shape)
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gamma, self.beta)


class MLP(Module):
    """Two linear layers with a ReLU in between."""

    def __init__(self, din: int, hidden: int, dout: int, rng: np.random.Generator):
        self.fc1 = Linear(din, hidden, rng)
        self.fc2 = Linear(hidden, dout, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.o_proj = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        B, N, D = x.shape
        return T.transpose(T.reshape(x, (B, N, self.heads, D // self.heads)), (0, 2, 1, 3))

    def __call__(self, query: Tensor, key: Tensor, value: Tensor | None = None,
                 mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """query: (B, Nq, D); key/value: (B, Nk, D). Returns (out, weights[B, h, Nq, Nk])."""
        value = key if value is None else value
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        out, w = F.attention(q, k, v, mask)
        B, _, Nq, dh = out.shape
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, Nq, self.heads * dh))
        return self.o_proj(out), w


class EncoderLayer(Module):
    """Pre-norm transformer encoder block."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, ffn_mult: int = 2):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = MLP(dim, ffn_mult * dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h)[0]
        return x + self.ffn(self.norm2(x))


class DecoderLayer(Module):
    """Pre-norm decoder block: causal self-attention, cross-attention, FFN."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, ffn_mult: int = 2):
        self.norm1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.norm3 = LayerNorm(dim)
        self.ffn = MLP(dim, ffn_mult * dim, dim, rng)

    def __call__(self, x: Tensor, memory: Tensor, mask: np.ndarray) -> Tensor:
        h = self.norm1(x)
        x = x + self.self_attn(h, h, mask=mask)[0]
        x = x + self.cross_attn(self.norm2(x), memory)[0]
        return x + self.ffn(self.norm3(x))


class GRUCell(Module):
    def __init__(self, din: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.w_ih = Parameter(_uniform(rng, hidden, (din, 3 * hidden)))
        self.w_hh = Parameter(_uniform(rng, hidden, (hidden, 3 * hidden)))
        self.b_ih = Parameter(np.zeros(3 * hidden))
        self.b_hh = Parameter(np.zeros(3 * hidden))

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return F.gru_cell(x, h, self.w_ih, self.w_hh, self.b_ih, self.b_hh)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int | None = None, dilation: int = 1):
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (k // 2) if padding is None else padding
        self.weight = Parameter(_uniform(rng, cin * k * k, (cout, cin, k, k)))
        self.bias = Parameter(np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return C.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding,
                        dilation=self.dilation)


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator):
        self.padding = k // 2
        self.weight = Parameter(_uniform(rng, cin * k ** 3, (cout, cin, k, k, k)))
        self.bias = Parameter(np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return C.conv3d(x, self.weight, self.bias, padding=self.padding)
