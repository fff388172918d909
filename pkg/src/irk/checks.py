"""Gradient-check suite covering every loss and every layer type.

Each case builds a small random instance in float64 and compares
``Tape.backward`` against central differences.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .config import ModelConfig
from .editing import editing_layer_forward, editing_transformer_forward, fusion_forward
from .encoders import encode_image_batch, encode_text_batch, patchify
from .gradcheck import finite_diff_check
from .losses import (adaptive_triplet_loss, contrastive_loss, identity_loss,
                     match_labels, match_loss, mine_triplets, total_loss_retrieval, total_loss_t2i)
from .model import InstructReID
from .tensor import Tensor, l2_normalize, layer_norm, matmul, mul, precision, softmax_lastdim, tsum

TOLERANCE = 1e-4

TINY = dict(image_height=8, image_width=8, patch_size=4, channels=2, dim=8, heads=2, layers=2,
            encoder_blocks=1, fusion_blocks=2, mlp_ratio=2, vocab_size=64, max_text_len=8,
            instruction_image_size=8, num_identities=3, instruction_encoder_frozen=False)


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    entries: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def _leaf(rng, shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


def _jitter(params, rng, scale=0.2):
    for p in params:
        p.data = p.data + rng.normal(0.0, scale, p.shape)


def _case_primitives(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (4, 5))
    g, beta = Tensor(1 + 0.1 * rng.normal(size=5), requires_grad=True), _leaf(rng, (5,), 0.1)
    w = rng.normal(size=(3, 5))

    def f():
        y = softmax_lastdim(matmul(a, b))
        y = layer_norm(y + matmul(a, b) * 0.3, g, beta)
        return tsum(mul(l2_normalize(y), Tensor(w)))
    return f, [a, b, g, beta]


def _case_triplet(rng):
    feats = _leaf(rng, (8, 4))
    labels = np.repeat(np.arange(2), 4)
    instr = rng.normal(size=(8, 6))
    batch = mine_triplets(labels, instr, margin=0.3)
    return (lambda: adaptive_triplet_loss(feats, batch)), [feats]


def _case_identity(rng):
    feats, w, b = _leaf(rng, (6, 4)), _leaf(rng, (4, 3)), _leaf(rng, (3,))
    labels = np.array([0, 1, 2, 0, 1, 2])
    return (lambda: identity_loss(feats, labels, w, b)), [feats, w, b]


def _case_contrastive(rng):
    img, txt = _leaf(rng, (6, 5)), _leaf(rng, (6, 5))
    labels = np.array([0, 0, 1, 2, 3, 3])
    return (lambda: contrastive_loss(l2_normalize(img), l2_normalize(txt), 0.5, labels)), [img, txt]


def _case_match(rng):
    logits = _leaf(rng, (5, 2))
    y = match_labels([True, False, True, True, False])
    return (lambda: match_loss(logits, y)), [logits]


def _case_retrieval_total(rng):
    f, fo = _leaf(rng, (8, 4)), _leaf(rng, (8, 4))
    heads = [(_leaf(rng, (4, 2)), _leaf(rng, (2,))) for _ in range(2)]
    labels = np.repeat(np.arange(2), 4)
    batch = mine_triplets(labels, rng.normal(size=(8, 6)), margin=0.3)

    def obj():
        return total_loss_retrieval(f, fo, labels, batch, heads[0], heads[1])[0]
    return obj, [f, fo, *heads[0], *heads[1]]


def _case_t2i_total(rng):
    img, txt, logits = _leaf(rng, (4, 5)), _leaf(rng, (4, 5)), _leaf(rng, (6, 2))
    y = match_labels([True] * 4 + [False] * 2)
    labels = np.arange(4)

    def obj():
        return total_loss_t2i(l2_normalize(img), l2_normalize(txt), logits, y, labels, 0.5)[0]
    return obj, [img, txt, logits]


def _tiny_model(rng):
    with precision("float64"):
        model = InstructReID(ModelConfig(**TINY), seed=int(rng.integers(1 << 31)))
    _jitter(model.parameters(), rng)
    return model


def _case_editing_layer(rng):
    m = _tiny_model(rng)
    layer = m.layers[0]
    x, instr = _leaf(rng, (2, 5, 8)), _leaf(rng, (2, 3, 8))
    w = Tensor(rng.normal(size=(2, 5, 8)))
    return (lambda: tsum(mul(editing_layer_forward(x, instr, layer), w))), [x, instr, *layer.parameters()]


def _case_editing_transformer(rng):
    m = _tiny_model(rng)
    imgs = rng.normal(size=(2, 2, 8, 8))
    instr = _leaf(rng, (2, 3, 8))
    w = Tensor(rng.normal(size=(2, 8)))
    params = [instr] + [p for layer in m.layers for p in layer.parameters()] + m.embed.parameters()

    def obj():
        return tsum(mul(editing_transformer_forward(patchify(imgs, m.embed, m.cfg), instr, m.layers), w))
    return obj, params


def _case_fusion(rng):
    m = _tiny_model(rng)
    feat, instr = _leaf(rng, (3, 8)), _leaf(rng, (3, 4, 8))
    w = Tensor(rng.normal(size=(3, 8)))
    params = [feat, instr] + [p for blk in m.fusion for p in blk.parameters()]
    return (lambda: tsum(mul(fusion_forward(feat, instr, m.fusion), w))), params


def _case_text_encoder(rng):
    m = _tiny_model(rng)
    texts = [["keep the same clothes"], ["ignore clothes", "the person walks"]]
    w = rng.normal(size=(2, 8, 8))

    def obj():
        feats, mask = encode_text_batch(texts, m.instruction, m.cfg)
        mw = w[:, :feats.shape[1]] * mask[..., None]
        return tsum(mul(feats, Tensor(mw)))
    params = [p for n, p in m.instruction.named_parameters() if not n.startswith("image_")]
    return obj, params


def _case_image_encoder(rng):
    m = _tiny_model(rng)
    imgs = rng.normal(size=(2, 2, 8, 8))
    w = Tensor(rng.normal(size=(2, 4, 8)))
    params = [p for n, p in m.instruction.named_parameters() if not n.startswith("text_")]
    return (lambda: tsum(mul(encode_image_batch(imgs, m.instruction, m.cfg), w))), params


def _case_full_model(rng):
    m = _tiny_model(rng)
    imgs = rng.normal(size=(4, 2, 8, 8))
    tmpl = rng.normal(size=(4, 2, 8, 8))
    labels = np.array([0, 0, 1, 1])
    # relatedness is a constant of the batch, not a path for gradients
    batch = mine_triplets(labels, m.encode_templates(tmpl).data.mean(axis=1), margin=0.3)

    def obj():
        instr = m.encode_templates(tmpl)
        f = m.image_features(imgs, instr)
        fo = m.fuse(f, instr)
        return total_loss_retrieval(f, fo, labels, batch, m.id_head, m.id_head_out)[0]
    return obj, m.parameters()


CASES: dict[str, Callable] = {
    "primitives": _case_primitives,
    "adaptive_triplet": _case_triplet,
    "identity_ce": _case_identity,
    "contrastive": _case_contrastive,
    "match_ce": _case_match,
    "loss_retrieval": _case_retrieval_total,
    "loss_t2i": _case_t2i_total,
    "editing_layer": _case_editing_layer,
    "editing_transformer": _case_editing_transformer,
    "fusion": _case_fusion,
    "text_encoder": _case_text_encoder,
    "image_encoder": _case_image_encoder,
    "full_model": _case_full_model,
}


def run_gradcheck(seed: int = 0, h: float = 1e-5, cases=None, max_entries: int | None = 40) -> list[CheckResult]:
    """Run every case (or the named subset) and return one result per case."""
    results = []
    with precision("float64"):
        for name in cases or CASES:
            rng = np.random.default_rng([seed, len(name)])
            t0 = time.perf_counter()
            f, params = CASES[name](rng)
            err = finite_diff_check(f, params, h=h, max_entries=max_entries, rng=rng)
            entries = sum(min(p.data.size, max_entries or p.data.size) for p in params)
            results.append(CheckResult(name, err, entries, time.perf_counter() - t0))
    return results
