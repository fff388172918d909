"""Retrieval evaluation: AP, mAP, CMC, camera filtering, cross-modality
modes and the two-stage text-to-image rerank."""
from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError, ShapeError

POLICIES = ("standard", "none")
MODES = {"vis2ir": ("visible", "infrared"), "ir2vis": ("infrared", "visible")}
MODE_NAMES = {"vis2ir": "VIS-to-IR", "ir2vis": "IR-to-VIS"}


def average_precision(relevance) -> float:
    """Mean of precision@k over the ranks k holding a relevant item."""
    rel = np.asarray(relevance, dtype=bool)
    r = int(rel.sum())
    if r == 0:
        raise ContractError("average precision needs at least one relevant item")
    ranks = np.flatnonzero(rel) + 1
    hits = np.arange(1, r + 1)
    return float(np.mean(hits / ranks))


@dataclass
class RankingResult:
    query: int
    order: np.ndarray        # gallery indices, best first
    relevant: np.ndarray     # flags aligned with ``order``
    scores: np.ndarray | None = None


@dataclass
class EvalReport:
    mAP: float
    cmc: list
    task: str = ""
    mode: str = ""
    num_query: int = 0
    num_gallery: int = 0
    num_valid: int = 0
    num_skipped: int = 0
    policy: str = "standard"
    extra: dict = field(default_factory=dict)
    per_query_ap: list = field(default_factory=list)

    KEYS = ("task", "mode", "policy", "mAP", "cmc", "num_query", "num_gallery", "num_valid",
            "num_skipped", "extra", "per_query_ap")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.KEYS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        unknown = set(d) - set(cls.KEYS)
        if unknown:
            raise ContractError(f"unknown report keys {sorted(unknown)}")
        return cls(**d)

    def top(self, k: int) -> float:
        return self.cmc[k - 1]

    def per_query_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["query", "ap"])
        for q, ap in self.per_query_ap:
            w.writerow([q, repr(ap)])
        return buf.getvalue()


def rank_gallery(sims: np.ndarray) -> np.ndarray:
    """Stable descending order; ties keep gallery index order."""
    return np.argsort(-np.asarray(sims), kind="stable")


def _check_features(q, g):
    q, g = np.asarray(q, dtype=np.float64), np.asarray(g, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ShapeError(f"query {q.shape} and gallery {g.shape} features must be (n, d) with equal d")
    return q, g


def cosine_scores(query_feats, gallery_feats) -> np.ndarray:
    q, g = _check_features(query_feats, gallery_feats)
    qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    gn = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
    return qn @ gn.T


def evaluate(query_feats, gallery_feats, q_labels, g_labels, q_cams=None, g_cams=None,
             policy: str = "standard", max_rank: int | None = None, task: str = "",
             mode: str = "") -> EvalReport:
    """Cosine-similarity retrieval metrics."""
    return evaluate_scores(cosine_scores(query_feats, gallery_feats), q_labels, g_labels, q_cams,
                           g_cams, policy, max_rank, task, mode)


def evaluate_scores(scores, q_labels, g_labels, q_cams=None, g_cams=None, policy: str = "standard",
                    max_rank: int | None = None, task: str = "", mode: str = "",
                    rankings: list | None = None) -> EvalReport:
    """mAP and CMC from a (num_query, num_gallery) similarity matrix.

    Policy "standard" drops gallery items sharing identity and camera with
    the query.  ``rankings`` optionally supplies precomputed gallery orders.
    """
    scores = np.asarray(scores, dtype=np.float64)
    q_labels, g_labels = np.asarray(q_labels), np.asarray(g_labels)
    nq, ng = scores.shape
    if len(q_labels) != nq or len(g_labels) != ng:
        raise ShapeError("label counts do not match the score matrix")
    if policy not in POLICIES:
        raise ContractError(f"unknown filter policy {policy!r}")
    if policy == "standard":
        if q_cams is None or g_cams is None:
            raise ContractError("standard filtering needs camera ids")
        q_cams, g_cams = np.asarray(q_cams), np.asarray(g_cams)
    if ng == 0:
        raise ContractError("empty gallery")
    max_rank = max_rank or ng
    cmc = np.zeros(max_rank)
    aps, per_query, skipped = [], [], 0
    for i in range(nq):
        order = rank_gallery(scores[i]) if rankings is None else np.asarray(rankings[i])
        keep = np.ones(ng, dtype=bool)
        if policy == "standard":
            keep = ~((g_labels == q_labels[i]) & (g_cams == q_cams[i]))
        order = order[keep[order]]
        if len(order) == 0:
            raise ContractError(f"query {i}: gallery is empty after filtering")
        rel = g_labels[order] == q_labels[i]
        if not rel.any():
            skipped += 1
            continue
        ap = average_precision(rel)
        aps.append(ap)
        per_query.append([i, ap])
        first = int(np.argmax(rel))
        if first < max_rank:
            cmc[first:] += 1
    if skipped:
        warnings.warn(f"evaluate: {skipped} queries have no relevant gallery item and were skipped",
                      RuntimeWarning)
    valid = len(aps)
    if valid == 0:
        raise ContractError("no query has a relevant gallery item")
    return EvalReport(mAP=float(np.mean(aps)), cmc=(cmc / valid).tolist(), task=task, mode=mode,
                      num_query=nq, num_gallery=ng, num_valid=valid, num_skipped=skipped,
                      policy=policy, per_query_ap=per_query)


def evaluate_cross_modality(query_feats, q_modality, gallery_feats, g_modality, mode: str,
                            q_labels, g_labels, q_cams=None, g_cams=None,
                            policy: str = "standard", task: str = "vi") -> EvalReport:
    """Restrict queries to the source modality and gallery to the target, then evaluate."""
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}; expected one of {sorted(MODES)}")
    src, dst = MODES[mode]
    qm, gm = np.asarray(q_modality) == src, np.asarray(g_modality) == dst
    if not qm.any():
        raise ContractError(f"mode {mode}: no {src} queries")
    if not gm.any():
        raise ContractError(f"mode {mode}: no {dst} gallery items")
    sel = lambda a, m: None if a is None else np.asarray(a)[m]  # noqa: E731
    return evaluate(np.asarray(query_feats)[qm], np.asarray(gallery_feats)[gm], sel(q_labels, qm),
                    sel(g_labels, gm), sel(q_cams, qm), sel(g_cams, gm), policy, task=task,
                    mode=MODE_NAMES[mode])


def t2i_rerank(text_feat, gallery_feats, scorer: Callable, k: int = 128, query: int = 0,
               g_labels=None, q_label=None) -> RankingResult:
    """Cosine ranking, then the top ``k`` re-sorted by ``scorer(indices)``.

    ``scorer`` maps an index array into the gallery to positive-match
    scores; items past ``k`` keep their first-stage order.
    """
    if k < 1:
        raise ContractError("rerank depth k must be >= 1")
    sims = cosine_scores(np.asarray(text_feat)[None], gallery_feats)[0]
    first = rank_gallery(sims)
    k = min(k, len(first))
    head = first[:k]
    s = np.asarray(scorer(head), dtype=np.float64)
    head = head[np.argsort(-s, kind="stable")]
    order = np.concatenate([head, first[k:]])
    rel = np.zeros(len(order), dtype=bool) if g_labels is None else np.asarray(g_labels)[order] == q_label
    return RankingResult(query, order, rel, sims[order])


def instruction_hit_rate(scores, q_labels, g_labels, q_target_clothes, g_clothes) -> float:
    """Share of queries whose best-ranked same-identity gallery item wears
    the instructed clothes.  Queries whose identity has no such item are skipped."""
    scores = np.asarray(scores)
    q_labels, g_labels = np.asarray(q_labels), np.asarray(g_labels)
    g_clothes = np.asarray(g_clothes)
    hits, n = 0, 0
    for i in range(len(q_labels)):
        same = np.flatnonzero(g_labels == q_labels[i])
        if not (g_clothes[same] == q_target_clothes[i]).any():
            continue
        order = same[rank_gallery(scores[i, same])]
        hits += int(g_clothes[order[0]] == q_target_clothes[i])
        n += 1
    if n == 0:
        raise ContractError("no query has an instruction-matching gallery item")
    return hits / n
