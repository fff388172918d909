"""Query-image patch embedding and the instruction encoder."""
from __future__ import annotations

import re
import zlib
from typing import Sequence

import numpy as np

from .config import ModelConfig
from .errors import ContractError, ShapeError
from .nn import LayerNorm, Linear, Module, TransformerBlock, param, prepend, trunc_normal
from .tensor import Tensor, add, broadcast_to, getitem, reshape

_WORD = re.compile(r"[a-z0-9]+")


def tokenize(text: str, vocab_size: int) -> list[int]:
    """Lowercase, split on anything that is not a letter or digit, hash each
    word into ``vocab_size`` buckets with CRC-32."""
    return [zlib.crc32(w.encode("utf-8")) % vocab_size for w in _WORD.findall(text.lower())]


def image_to_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, ch, H, W) -> (B, N, ch*patch*patch), patches in row-major order."""
    b, ch, h, w = images.shape
    x = images.reshape(b, ch, h // patch, patch, w // patch, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (h // patch) * (w // patch), ch * patch * patch)


class QueryEmbedding(Module):
    def __init__(self, rng, cfg: ModelConfig):
        self.proj = Linear(rng, cfg.channels * cfg.patch_size**2, cfg.dim)
        self.pos = param(trunc_normal(rng, (cfg.num_patches + 1, cfg.dim)))
        self.cls = param(trunc_normal(rng, (cfg.dim,)))


def patchify(images, emb: QueryEmbedding, cfg: ModelConfig) -> Tensor:
    """Embed images into token sequences with the CLS token at position 0.

    Accepts a single (ch, H, W) image or a (B, ch, H, W) batch and returns
    (N+1, C) or (B, N+1, C) respectively.
    """
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    expected = (cfg.channels, cfg.image_height, cfg.image_width)
    if arr.ndim != 4 or arr.shape[1:] != expected:
        raise ShapeError(f"patchify: expected image shape {expected}, got {arr.shape[-3:]}")
    patches = Tensor(image_to_patches(arr, cfg.patch_size), dtype=emb.pos.dtype)
    tokens = prepend(emb.cls, emb.proj(patches))
    tokens = add(tokens, emb.pos)
    return tokens[0] if single else tokens


class InstructionEncoder(Module):
    """Small transformer shared by text and image instructions; each input
    kind has its own input projection and position table."""

    def __init__(self, rng, cfg: ModelConfig):
        self.text_embed = param(trunc_normal(rng, (cfg.vocab_size, cfg.dim)))
        self.text_pos = param(trunc_normal(rng, (cfg.max_text_len, cfg.dim)))
        self.image_proj = Linear(rng, cfg.channels * cfg.patch_size**2, cfg.dim)
        self.image_pos = param(trunc_normal(rng, (cfg.instruction_patches, cfg.dim)))
        self.blocks = [TransformerBlock(rng, cfg.dim, cfg.heads, cfg.mlp_ratio)
                       for _ in range(cfg.encoder_blocks)]
        self.ln_out = LayerNorm(cfg.dim)

    def trunk(self, x: Tensor, mask=None) -> Tensor:
        for blk in self.blocks:
            x = blk(x, mask)
        return self.ln_out(x)


def text_token_ids(sentences: Sequence[str], cfg: ModelConfig) -> list[int]:
    if isinstance(sentences, str):
        sentences = [sentences]
    ids = [t for s in sentences for t in tokenize(s, cfg.vocab_size)]
    if not ids:
        raise ContractError("empty instruction: every task needs at least one token")
    if len(ids) > cfg.max_text_len:
        raise ContractError(f"instruction has {len(ids)} tokens, max_text_len is {cfg.max_text_len}")
    return ids


def encode_text_batch(texts: Sequence[Sequence[str]], enc: InstructionEncoder,
                      cfg: ModelConfig) -> tuple[Tensor, np.ndarray]:
    """Encode several instructions, right-padded to a common length.

    Returns features (B, M, C) and a boolean (B, M) mask of real tokens.
    """
    ids = [text_token_ids(t, cfg) for t in texts]
    m = max(len(i) for i in ids)
    padded = np.zeros((len(ids), m), dtype=np.int64)
    mask = np.zeros((len(ids), m), dtype=bool)
    for row, seq in enumerate(ids):
        padded[row, :len(seq)] = seq
        mask[row, :len(seq)] = True
    x = getitem(enc.text_embed, padded)
    x = add(x, getitem(enc.text_pos, slice(0, m)))
    return enc.trunk(x, None if mask.all() else mask), mask


def encode_text_instruction(sentences: Sequence[str], enc: InstructionEncoder,
                            cfg: ModelConfig) -> Tensor:
    """F_T for one text instruction, shape (M, C)."""
    feats, _ = encode_text_batch([sentences], enc, cfg)
    return feats[0]


def encode_image_batch(templates, enc: InstructionEncoder, cfg: ModelConfig) -> Tensor:
    arr = np.asarray(templates.data if isinstance(templates, Tensor) else templates)
    s = cfg.instruction_image_size
    expected = (cfg.channels, s, s)
    if arr.ndim != 4 or arr.shape[1:] != expected:
        raise ShapeError(f"image instruction: expected {expected}, got {arr.shape[-3:]}")
    patches = Tensor(image_to_patches(arr, cfg.patch_size), dtype=enc.image_pos.dtype)
    x = add(enc.image_proj(patches), enc.image_pos)
    return enc.trunk(x)


def encode_image_instruction(template, enc: InstructionEncoder, cfg: ModelConfig) -> Tensor:
    """F_T for one clothes-template image (ch, s, s), shape (M, C)."""
    arr = np.asarray(template.data if isinstance(template, Tensor) else template)
    if arr.ndim != 3:
        raise ShapeError(f"image instruction must be (ch, h, w), got {arr.shape}")
    return encode_image_batch(arr[None], enc, cfg)[0]


def pool_instruction(feats: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Masked mean over tokens followed by L2 normalisation (numpy, no grad)."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim == 2:
        feats = feats[None]
        mask = None if mask is None else np.asarray(mask)[None]
    if mask is None:
        pooled = feats.mean(axis=1)
    else:
        w = mask.astype(np.float64)[..., None]
        pooled = (feats * w).sum(axis=1) / w.sum(axis=1)
    norm = np.linalg.norm(pooled, axis=-1, keepdims=True)
    return pooled / np.maximum(norm, 1e-12)


def masked_mean(feats: Tensor, mask: np.ndarray | None) -> Tensor:
    """Differentiable mean over the token axis of (B, M, C) honouring a mask."""
    if mask is None:
        return feats.mean(axis=1)
    w = mask.astype(feats.dtype) / mask.sum(axis=1, keepdims=True)
    return (feats * Tensor(w[..., None], dtype=feats.dtype)).sum(axis=1)


def shared_instruction(feats: Tensor, batch: int) -> Tensor:
    """Broadcast one (M, C) instruction over a batch."""
    m, c = feats.shape
    return broadcast_to(reshape(feats, (1, m, c)), (batch, m, c))
