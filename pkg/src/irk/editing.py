"""Zero-init gated cross-attention editing layers and the fusion module.

Each editing layer attends from the query-image tokens to two key sets:
the image tokens themselves and the instruction tokens.  The second
attention map is scaled per head by a gate that starts at exactly zero,
so a freshly initialised editor is a plain ViT encoder.
"""
from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .errors import ContractError, ShapeError
from .nn import LayerNorm, Linear, MLP, Module, attention_weights, merge_heads, param, split_heads
from .tensor import Tensor, matmul, mul, reshape
from .encoders import shared_instruction


class EditingLayer(Module):
    def __init__(self, rng, dim: int, heads: int, mlp_ratio: int = 4):
        self.heads = heads
        self.ln1 = LayerNorm(dim)
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim, bias=False)
        self.v = Linear(rng, dim, dim)
        self.k_instr = Linear(rng, dim, dim, bias=False)
        self.v_instr = Linear(rng, dim, dim)
        self.o = Linear(rng, dim, dim)
        self.gate = param(np.zeros(heads))
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(rng, dim, dim * mlp_ratio)


def _as_batched(instr, batch: int):
    if instr is None:
        return None
    if isinstance(instr, np.ndarray):
        if instr.shape[-2] == 0:
            raise ContractError("instruction has no tokens")
        instr = Tensor(instr)
    if instr.ndim == 2:
        instr = shared_instruction(instr, batch)
    if instr.ndim != 3 or instr.shape[0] != batch:
        raise ShapeError(f"instruction features {instr.shape} do not match batch {batch}")
    return instr


def editing_layer_forward(x: Tensor, instr, layer: EditingLayer, mask=None,
                          trace: dict | None = None) -> Tensor:
    """One zero-init transformer layer.

    ``x`` is (B, N+1, C).  ``instr`` is (B, M, C), a shared (M, C), or None
    for the gate-free baseline.  ``trace`` receives the two attention
    segments when given.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    b = x.shape[0]
    instr = _as_batched(instr, b)
    h = layer.ln1(x)
    q = split_heads(layer.q(h), layer.heads)
    k = split_heads(layer.k(h), layer.heads)
    v = split_heads(layer.v(h), layer.heads)
    attn = attention_weights(q, k)
    out = matmul(attn, v)
    if instr is not None:
        k2 = split_heads(layer.k_instr(instr), layer.heads)
        v2 = split_heads(layer.v_instr(instr), layer.heads)
        gated = mul(attention_weights(q, k2, mask), reshape(layer.gate, (1, layer.heads, 1, 1)))
        out = out + matmul(gated, v2)
        if trace is not None:
            trace["instruction"] = gated.data
    if trace is not None:
        trace["self"] = attn.data
    x = x + layer.o(merge_heads(out))
    x = x + layer.mlp(layer.ln2(x))
    return x[0] if squeeze else x


def editing_transformer_forward(tokens: Tensor, instr, layers, mask=None,
                                return_sequence: bool = False) -> Tensor:
    """Run all editing layers and return the final CLS feature (B, C)."""
    if not layers:
        raise ContractError("editing transformer needs at least one layer")
    x = tokens
    for layer in layers:
        x = editing_layer_forward(x, instr, layer, mask)
    if return_sequence:
        return x
    return x[..., 0, :]


class FusionBlock(Module):
    """Pre-norm cross-attention from a single image token to instruction tokens."""

    def __init__(self, rng, dim: int, heads: int):
        self.heads = heads
        self.ln = LayerNorm(dim)
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim, bias=False)
        self.v = Linear(rng, dim, dim)
        self.o = Linear(rng, dim, dim)


def fusion_forward(feat: Tensor, instr, blocks, mask=None) -> Tensor:
    """Combine image features (B, C) with instruction tokens into F_out (B, C)."""
    squeeze = feat.ndim == 1
    if squeeze:
        feat = reshape(feat, (1, feat.shape[0]))
    b, c = feat.shape
    instr = _as_batched(instr, b)
    if instr is None:
        raise ContractError("fusion needs instruction features")
    x = reshape(feat, (b, 1, c))
    for blk in blocks:
        q = split_heads(blk.q(blk.ln(x)), blk.heads)
        k = split_heads(blk.k(instr), blk.heads)
        v = split_heads(blk.v(instr), blk.heads)
        a = attention_weights(q, k, mask)
        x = x + blk.o(merge_heads(matmul(a, v)))
    out = reshape(x, (b, c))
    return out[0] if squeeze else out


def match_head(feat: Tensor, head: Linear) -> Tensor:
    """Two-way logits; index 1 is the positive (matching) class."""
    return head(feat)


def build_editing_layers(rng, cfg: ModelConfig) -> list[EditingLayer]:
    return [EditingLayer(rng, cfg.dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers)]


def build_fusion(rng, cfg: ModelConfig) -> list[FusionBlock]:
    return [FusionBlock(rng, cfg.dim, cfg.heads) for _ in range(cfg.fusion_blocks)]
