"""The instruction-conditioned retrieval network assembled from its parts."""
from __future__ import annotations

import contextlib

import numpy as np

from .config import ModelConfig
from .editing import build_editing_layers, build_fusion, editing_transformer_forward, fusion_forward
from .encoders import (InstructionEncoder, QueryEmbedding, encode_image_batch, encode_text_batch,
                       masked_mean, patchify)
from .errors import ContractError
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor, l2_normalize, no_grad, precision


class InstructReID(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=None):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        ctx = precision(dtype) if dtype is not None else contextlib.nullcontext()
        with ctx:
            self.embed = QueryEmbedding(rng, cfg)
            self.instruction = InstructionEncoder(rng, cfg)
            self.layers = build_editing_layers(rng, cfg)
            self.norm = LayerNorm(cfg.dim, affine=False)
            self.fusion = build_fusion(rng, cfg)
            self.match = Linear(rng, cfg.dim, 2)
            self.text_proj = Linear(rng, cfg.dim, cfg.dim)
            self.id_head = Linear(rng, cfg.dim, cfg.num_identities)
            self.id_head_out = Linear(rng, cfg.dim, cfg.num_identities)

    def trainable_parameters(self) -> list[Tensor]:
        frozen = self.cfg.instruction_encoder_frozen
        return [p for n, p in self.named_parameters()
                if not (frozen and n.startswith("instruction."))]

    def _encoder_ctx(self):
        return no_grad() if self.cfg.instruction_encoder_frozen else contextlib.nullcontext()

    def encode_texts(self, texts):
        """Instruction features for a list of sentence lists -> (B, M, C), mask."""
        with self._encoder_ctx():
            return encode_text_batch(texts, self.instruction, self.cfg)

    def encode_templates(self, images) -> Tensor:
        with self._encoder_ctx():
            return encode_image_batch(images, self.instruction, self.cfg)

    def image_features(self, images, instr=None, mask=None) -> Tensor:
        """F: normalised final-layer CLS features (B, C); ``instr=None`` runs the plain path."""
        tokens = patchify(images, self.embed, self.cfg)
        return self.norm(editing_transformer_forward(tokens, instr, self.layers, mask))

    def fuse(self, feats: Tensor, instr, mask=None) -> Tensor:
        return fusion_forward(feats, instr, self.fusion, mask)

    def text_features(self, instr: Tensor, mask=None) -> Tensor:
        """Unit-norm text embeddings (B, C) from instruction token features."""
        return l2_normalize(self.text_proj(masked_mean(instr, mask)))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise ContractError(f"checkpoint is missing parameters: {missing[:5]}")
        for name, p in params.items():
            arr = np.asarray(arrays[name])
            if arr.shape != p.shape:
                raise ContractError(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
            arr = arr.astype(p.dtype, copy=True)
            arr.setflags(write=False)
            p.data = arr
