"""Training objectives: adaptive triplet, identity, contrastive and matching
losses, triplet mining, and the two task-level loss assemblies."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError, ShapeError
from .tensor import (Tensor, add, getitem, log_softmax_lastdim, matmul, mean, mul, relu,
                     swap_last, tsum)


@dataclass
class TripletBatch:
    """Index triples (anchor, r1, r2) with their relatedness pairs."""

    triples: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    betas: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    margin: float = 0.3

    def __post_init__(self):
        self.triples = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)
        self.betas = np.asarray(self.betas, dtype=np.float64).reshape(-1, 2)
        if len(self.triples) != len(self.betas):
            raise ShapeError("one beta pair per triple required")
        if self.margin < 0:
            raise ContractError("margin must be non-negative")

    @property
    def count(self) -> int:
        return len(self.triples)

    def __eq__(self, other):
        return (isinstance(other, TripletBatch) and self.margin == other.margin
                and np.array_equal(self.triples, other.triples)
                and np.array_equal(self.betas, other.betas))


def relatedness(y_a, y_r, ft_a, ft_r) -> float:
    """Identity indicator times cosine similarity of pooled instruction vectors."""
    if y_a != y_r:
        return 0.0
    a = np.asarray(ft_a, dtype=np.float64).ravel()
    r = np.asarray(ft_r, dtype=np.float64).ravel()
    na, nr = np.linalg.norm(a), np.linalg.norm(r)
    if na == 0 or nr == 0 or not np.isfinite(na * nr):
        raise NumericError("instruction vector with zero or non-finite norm")
    return float(np.clip(a @ r / (na * nr), -1.0, 1.0))


def relatedness_matrix(labels, instr=None) -> np.ndarray:
    """All pairwise relatednesses; ``instr=None`` means identity-only (beta in {0, 1})."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    if instr is None:
        return same.astype(np.float64)
    v = np.asarray(instr, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms == 0):
        raise NumericError("instruction vector with zero norm")
    u = v / norms[:, None]
    cos = np.clip(u @ u.T, -1.0, 1.0)
    return np.where(same, cos, 0.0)


def _sqdist_rows(features: Tensor, i: np.ndarray, j: np.ndarray) -> Tensor:
    diff = getitem(features, i) - getitem(features, j)
    return tsum(mul(diff, diff), axis=-1)


def adaptive_triplet_loss(features: Tensor, batch: TripletBatch) -> Tensor:
    """Mean over triples of [sign(b1-b2) * (d(a,r1) + (b1-b2) m - d(a,r2))]_+.

    ``d`` is the squared Euclidean distance on the raw features; sign(0)=0
    so equally related references contribute nothing.
    """
    if batch.count == 0:
        warnings.warn("adaptive_triplet_loss: empty triplet set, returning 0", RuntimeWarning)
        return mul(tsum(features), 0.0)
    t = batch.triples
    if t.min() < 0 or t.max() >= features.shape[0]:
        raise ContractError("triplet index out of range for the batch")
    gap = batch.betas[:, 0] - batch.betas[:, 1]
    sign = np.sign(gap)
    d1 = _sqdist_rows(features, t[:, 0], t[:, 1])
    d2 = _sqdist_rows(features, t[:, 0], t[:, 2])
    s = Tensor(sign, dtype=features.dtype)
    inner = add(d1 - d2, Tensor(gap * batch.margin, dtype=features.dtype))
    return mean(relu(mul(s, inner)))


def identity_loss(features: Tensor, labels, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Mean softmax cross-entropy of a linear identity classifier."""
    labels = np.asarray(labels, dtype=np.int64)
    k = weight.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"identity label out of range [0, {k})")
    logits = matmul(features, weight)
    if bias is not None:
        logits = logits + bias
    return cross_entropy(logits, labels)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax_lastdim(logits)
    picked = getitem(logp, (np.arange(len(labels)), labels))
    return mul(mean(picked), -1.0)


def contrastive_loss(image: Tensor, text: Tensor, temperature: float = 0.07,
                     labels=None) -> Tensor:
    """Symmetric InfoNCE over the in-batch similarity matrix.

    Inputs are expected to be L2-normalised.  With ``labels``, off-diagonal
    pairs of the same identity are dropped from the negative set.
    """
    b = image.shape[0]
    if b < 2:
        raise ContractError("contrastive loss needs a batch of at least 2")
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    if image.shape != text.shape:
        raise ShapeError(f"image {image.shape} vs text {text.shape}")
    sim = mul(matmul(image, swap_last(text)), 1.0 / temperature)
    if labels is not None:
        labels = np.asarray(labels)
        drop = (labels[:, None] == labels[None, :]) & ~np.eye(b, dtype=bool)
        if drop.any():
            sim = add(sim, Tensor(np.where(drop, -np.inf, 0.0), dtype=sim.dtype))
    diag = np.arange(b)
    i2t = cross_entropy(sim, diag)
    t2i = cross_entropy(swap_last(sim), diag)
    return mul(add(i2t, t2i), 0.5)


def match_labels(positive) -> np.ndarray:
    """One-hot targets: [0, 1] for positive pairs, [1, 0] for negatives."""
    positive = np.asarray(positive, dtype=bool)
    return np.stack([~positive, positive], axis=1).astype(np.float64)


def match_loss(logits: Tensor, targets) -> Tensor:
    """Mean two-way cross-entropy against one-hot targets."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape or not np.all(targets.sum(axis=1) == 1) \
            or not np.all((targets == 0) | (targets == 1)):
        raise ContractError("match targets must be one-hot rows matching the logits")
    return cross_entropy(logits, targets.argmax(axis=1))


def mine_triplets(labels, instr=None, margin: float = 0.3, mode: str = "all",
                  features=None) -> TripletBatch:
    """Enumerate training triples from a P x K batch.

    ``all``: every (a, r1, r2) with r1 a same-identity sample other than a
    and r2 any sample other than a and r1.  ``hard``: per anchor, the
    farthest same-identity sample and the nearest other-identity sample
    (needs ``features``).  ``instr`` holds pooled instruction vectors;
    None gives identity-only relatedness.
    """
    labels = np.asarray(labels)
    n = len(labels)
    beta = relatedness_matrix(labels, instr)
    same = labels[:, None] == labels[None, :]
    eye = np.eye(n, dtype=bool)
    pos = same & ~eye
    lonely = ~pos.any(axis=1)
    if lonely.any():
        warnings.warn(f"mine_triplets: {int(lonely.sum())} anchors have no same-identity "
                      "partner and were skipped", RuntimeWarning)
    if mode == "all":
        a, r1 = np.nonzero(pos)
        r2 = np.tile(np.arange(n), len(a))
        a = np.repeat(a, n)
        r1 = np.repeat(r1, n)
        keep = (r2 != a) & (r2 != r1)
        a, r1, r2 = a[keep], r1[keep], r2[keep]
    elif mode == "hard":
        if features is None:
            raise ContractError("hard mining needs features")
        f = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
        sq = (f * f).sum(axis=1)
        dist = sq[:, None] + sq[None, :] - 2 * f @ f.T
        neg = ~same
        rows = [i for i in range(n) if pos[i].any() and neg[i].any()]
        a = np.array(rows, dtype=np.int64)
        r1 = np.array([np.flatnonzero(pos[i])[np.argmax(dist[i, pos[i]])] for i in rows], dtype=np.int64)
        r2 = np.array([np.flatnonzero(neg[i])[np.argmin(dist[i, neg[i]])] for i in rows], dtype=np.int64)
    else:
        raise ContractError(f"unknown mining mode {mode!r}")
    triples = np.stack([a, r1, r2], axis=1) if len(a) else np.zeros((0, 3), dtype=np.int64)
    betas = np.stack([beta[a, r1], beta[a, r2]], axis=1) if len(a) else np.zeros((0, 2))
    return TripletBatch(triples, betas, margin)


def total_loss_retrieval(feats: Tensor, feats_out: Tensor, labels, triplets: TripletBatch,
                         id_head, id_head_out) -> tuple[Tensor, dict[str, float]]:
    """Adaptive triplet + identity loss on both F and F_out, unit weights.

    ``id_head`` and ``id_head_out`` are (weight, bias) pairs or Linear modules.
    """
    def _wb(head):
        return (head.weight, getattr(head, "bias", None)) if hasattr(head, "weight") else head

    terms = {
        "atri": adaptive_triplet_loss(feats, triplets),
        "id": identity_loss(feats, labels, *_wb(id_head)),
        "atri_out": adaptive_triplet_loss(feats_out, triplets),
        "id_out": identity_loss(feats_out, labels, *_wb(id_head_out)),
    }
    total = terms["atri"] + terms["id"] + terms["atri_out"] + terms["id_out"]
    return total, {k: float(v.data) for k, v in terms.items()}


def t2i_pairs(labels, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Positive pairs (i, i) plus one negative per text with a random other-identity image.

    Returns (image_index, text_index, positive) arrays; texts whose whole
    batch shares their identity get no negative.
    """
    labels = np.asarray(labels)
    b = len(labels)
    img, txt, positive = list(range(b)), list(range(b)), [True] * b
    for t in range(b):
        cands = np.flatnonzero(labels != labels[t])
        if len(cands):
            img.append(int(rng.choice(cands)))
            txt.append(t)
            positive.append(False)
    return np.array(img), np.array(txt), np.array(positive)


def total_loss_t2i(image_feats: Tensor, text_feats: Tensor, match_logits: Tensor, match_targets,
                   labels=None, temperature: float = 0.07) -> tuple[Tensor, dict[str, float]]:
    """Contrastive image-text alignment plus the pair-matching loss."""
    cl = contrastive_loss(image_feats, text_feats, temperature, labels)
    ml = match_loss(match_logits, match_targets)
    return cl + ml, {"cl": float(cl.data), "match": float(ml.data)}
