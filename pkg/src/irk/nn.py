"""Parameter containers and the attention primitive shared by all blocks."""
from __future__ import annotations

import math

import numpy as np

from .tensor import (Tensor, add, broadcast_to, concat, default_dtype, gelu, layer_norm, linear,
                     matmul, reshape, softmax_lastdim, swap_last, transpose)

INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * std


class Module:
    """Holds Tensors and sub-modules as attributes; lists of modules are allowed."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, sub in enumerate(value):
                    yield from sub.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())


def param(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, dtype=default_dtype())


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        self.weight = param(trunc_normal(rng, (d_in, d_out)))
        if bias:
            self.bias = param(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, getattr(self, "bias", None))


class LayerNorm(Module):
    def __init__(self, dim: int, affine: bool = True):
        if affine:
            self.gamma = param(np.ones(dim))
            self.beta = param(np.zeros(dim))
        else:
            # fixed unit scale, not registered as parameters
            self.gamma = Tensor(np.ones(dim))
            self.beta = Tensor(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    def __init__(self, rng, dim: int, hidden: int):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, c = x.shape
    return transpose(reshape(x, (b, t, heads, c // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, t, d = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, t, h * d))


def attention_weights(q: Tensor, k: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-softmax of q k^T / sqrt(d) for (B, h, T, d) inputs.

    ``mask`` is a boolean (B, Tk) array marking valid keys.
    """
    s = matmul(q, swap_last(k)) * (1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        bias = np.where(mask, 0.0, -np.inf).astype(s.dtype)[:, None, None, :]
        s = add(s, Tensor(bias))
    return softmax_lastdim(s)


class SelfAttention(Module):
    def __init__(self, rng, dim: int, heads: int):
        self.heads = heads
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim, bias=False)
        self.v = Linear(rng, dim, dim)
        self.o = Linear(rng, dim, dim)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        q, k, v = (split_heads(f(x), self.heads) for f in (self.q, self.k, self.v))
        a = attention_weights(q, k, mask)
        return self.o(merge_heads(matmul(a, v)))


class TransformerBlock(Module):
    """Pre-norm self-attention block."""

    def __init__(self, rng, dim: int, heads: int, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(dim)
        self.attn = SelfAttention(rng, dim, heads)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(rng, dim, dim * mlp_ratio)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        x = x + self.attn(self.ln1(x), mask)
        return x + self.mlp(self.ln2(x))


def prepend(token: Tensor, x: Tensor) -> Tensor:
    """Prepend a (C,) token to every sequence of a (B, T, C) batch."""
    b, _, c = x.shape
    return concat([broadcast_to(reshape(token, (1, 1, c)), (b, 1, c)), x], axis=1)
