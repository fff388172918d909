"""Glue between records, instructions and the network: instruction
features for a batch, retrieval features, and per-task evaluation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .encoders import pool_instruction
from .errors import ContractError
from .instructions import Instruction, TaskKind, eval_phrases
from .metrics import (EvalReport, cosine_scores, evaluate_cross_modality, evaluate_scores,
                      instruction_hit_rate, t2i_rerank)
from .model import InstructReID
from .synth import Dataset, clothes_crop
from .tensor import Tensor, getitem, l2_normalize, no_grad, softmax_lastdim

EVAL_CHUNK = 64
FEATURES = ("cls", "fused")
DEFAULT_POLICY = {"trad": "standard", "cc": "standard", "vi": "standard",
                  "ctcc": "none", "li": "none", "t2i": "none"}


@dataclass
class InstructionFeatures:
    feats: Tensor              # (B, M, C)
    mask: np.ndarray | None    # (B, M) real-token flags, None when nothing is padded
    pooled: np.ndarray         # (B, C) unit vectors used for relatedness

    def take(self, idx) -> "InstructionFeatures":
        idx = np.asarray(idx)
        mask = None if self.mask is None else self.mask[idx]
        return InstructionFeatures(getitem(self.feats, idx), mask, self.pooled[idx])


def _template_image(ds: Dataset, inst: Instruction, size: int) -> np.ndarray:
    ref = inst.ref
    if "crop_of" in ref:
        return clothes_crop(ds.image(ds.record(ref["crop_of"])), size)
    return ds.template(ref["identity"], ref["clothes"], size)


def _cache_key(inst: Instruction):
    return ("text", inst.text) if inst.text is not None else ("image", inst.image_ref)


def encode_instructions(model: InstructReID, ds: Dataset, instrs: Sequence[Instruction],
                        cache: dict | None = None) -> InstructionFeatures:
    """Instruction token features for a batch.

    With a frozen encoder each distinct instruction is encoded once and
    served from ``cache`` afterwards.
    """
    cfg = model.cfg
    if not instrs:
        raise ContractError("empty instruction batch")
    texts = [i.text is not None for i in instrs]
    if any(texts) and not all(texts):
        raise ContractError("cannot mix text and image instructions in one batch")
    if not cfg.instruction_encoder_frozen or cache is None:
        if texts[0]:
            feats, mask = model.encode_texts([list(i.text) for i in instrs])
        else:
            imgs = np.stack([_template_image(ds, i, cfg.instruction_image_size) for i in instrs])
            feats, mask = model.encode_templates(imgs), None
        return InstructionFeatures(feats, None if mask is None or mask.all() else mask,
                                   pool_instruction(feats.data, mask))
    singles = []
    for inst in instrs:
        key = _cache_key(inst)
        if key not in cache:
            if texts[0]:
                f, _ = model.encode_texts([list(inst.text)])
            else:
                f = model.encode_templates(_template_image(ds, inst, cfg.instruction_image_size)[None])
            cache[key] = f.data[0]
        singles.append(cache[key])
    m = max(len(s) for s in singles)
    feats = np.zeros((len(singles), m, singles[0].shape[-1]), dtype=singles[0].dtype)
    mask = np.zeros((len(singles), m), dtype=bool)
    for i, s in enumerate(singles):
        feats[i, :len(s)] = s
        mask[i, :len(s)] = True
    mask = None if mask.all() else mask
    return InstructionFeatures(Tensor(feats), mask, pool_instruction(feats, mask))


def retrieval_features(model: InstructReID, images, instr: InstructionFeatures):
    """F (editing transformer CLS) and F_out (after fusion) for a batch."""
    f = model.image_features(images, instr.feats, instr.mask)
    return f, model.fuse(f, instr.feats, instr.mask)


# ---------------------------------------------------------------------------
# evaluation

def eval_instruction(task: str, rec, ds: Dataset, role: str, phrase: str | None = None) -> Instruction:
    """Deterministic test-time instruction for a record."""
    kind = TaskKind.parse(task)
    if kind in (TaskKind.TRAD, TaskKind.CC, TaskKind.VI):
        return Instruction(kind, text=(phrase or eval_phrases(kind)[0],))
    if kind == TaskKind.CTCC:
        if role == "gallery":
            return Instruction(kind, image_ref={"crop_of": rec.uid})
        return Instruction(kind, image_ref={"identity": rec.identity, "clothes": rec.template_clothes})
    if kind == TaskKind.LI:
        src = rec if role == "gallery" else ds.record(rec.instruction_uid)
        return Instruction(kind, text=tuple(src.description))
    return Instruction(kind, text=tuple(rec.description))


def embed_records(model: InstructReID, ds: Dataset, recs, instrs, cache=None,
                  feature: str = "cls") -> np.ndarray:
    """Retrieval features for every record, in chunks, without recording gradients.

    ``feature`` picks the editing-transformer CLS output ("cls") or the
    fusion output ("fused").
    """
    if feature not in FEATURES:
        raise ContractError(f"feature must be one of {FEATURES}, got {feature!r}")
    out = []
    with no_grad():
        for s in range(0, len(recs), EVAL_CHUNK):
            chunk = recs[s:s + EVAL_CHUNK]
            inst = encode_instructions(model, ds, instrs[s:s + EVAL_CHUNK], cache)
            f, fo = retrieval_features(model, ds.images(chunk), inst)
            out.append(np.asarray((f if feature == "cls" else fo).data, dtype=np.float64))
    return np.concatenate(out)


def _split(ds: Dataset, task: str):
    queries = ds.manifest.select("query", task)
    gallery = ds.manifest.select("gallery", task)
    if not queries or not gallery:
        raise ContractError(f"manifest has no {task} query/gallery split")
    return queries, gallery


def _arrays(recs, attr):
    return np.array([getattr(r, attr) for r in recs])


def evaluate_task(model: InstructReID, ds: Dataset, task: str, mode: str = "vis2ir",
                  policy: str | None = None, sweep: bool = False, rerank_k: int = 128,
                  feature: str = "cls") -> EvalReport:
    """Embed the task's query and gallery splits and score them."""
    task = TaskKind.parse(task).value
    policy = policy or DEFAULT_POLICY[task]
    queries, gallery = _split(ds, task)
    if task == "t2i":
        return _evaluate_t2i(model, ds, queries, gallery, rerank_k)
    cache: dict = {}
    phrases = eval_phrases(task, sweep) if task in ("trad", "cc", "vi") else (None,)
    reports = []
    for phrase in phrases:
        qi = [eval_instruction(task, r, ds, "query", phrase) for r in queries]
        gi = [eval_instruction(task, r, ds, "gallery", phrase) for r in gallery]
        qf = embed_records(model, ds, queries, qi, cache, feature)
        gf = embed_records(model, ds, gallery, gi, cache, feature)
        args = (_arrays(queries, "identity"), _arrays(gallery, "identity"),
                _arrays(queries, "camera"), _arrays(gallery, "camera"))
        if task == "vi":
            rep = evaluate_cross_modality(qf, _arrays(queries, "modality"), gf,
                                          _arrays(gallery, "modality"), mode, *args, policy=policy)
        else:
            rep = evaluate_scores(cosine_scores(qf, gf), *args, policy=policy, task=task)
            if task in ("ctcc", "li"):
                target = np.array([r.template_clothes if task == "ctcc"
                                   else ds.record(r.instruction_uid).clothes for r in queries])
                rep.extra["instruction_hit_rate"] = instruction_hit_rate(
                    cosine_scores(qf, gf), args[0], args[1], target, _arrays(gallery, "clothes"))
        rep.extra["feature"] = feature
        reports.append(rep)
    if len(reports) == 1:
        return reports[0]
    first = reports[0]
    first.extra["per_phrase_mAP"] = [r.mAP for r in reports]
    first.mAP = float(np.mean([r.mAP for r in reports]))
    first.cmc = np.mean([r.cmc for r in reports], axis=0).tolist()
    first.extra["sweep"] = True
    return first


def _evaluate_t2i(model, ds, queries, gallery, k):
    cache: dict = {}
    with no_grad():
        g_raw = np.concatenate([model.image_features(ds.images(gallery[s:s + EVAL_CHUNK])).data
                                for s in range(0, len(gallery), EVAL_CHUNK)])
        q_inst = [eval_instruction("t2i", r, ds, "query") for r in queries]
        tf = encode_instructions(model, ds, q_inst, cache)
        q_feat = model.text_features(tf.feats, tf.mask).data
        g_feat = l2_normalize(Tensor(g_raw)).data
        rankings = []
        for i in range(len(queries)):
            one = tf.take([i])

            def scorer(idx, one=one):
                n = len(idx)
                instr = one.take(np.zeros(n, dtype=int))
                fo = model.fuse(Tensor(g_raw[idx]), instr.feats, instr.mask)
                return softmax_lastdim(model.match(fo)).data[:, 1]
            rankings.append(t2i_rerank(q_feat[i], g_feat, scorer, k, query=i).order)
    sims = cosine_scores(q_feat, g_feat)
    rep = evaluate_scores(sims, _arrays(queries, "identity"), _arrays(gallery, "identity"),
                          policy="none", task="t2i", rankings=rankings)
    rep.extra["rerank_k"] = min(k, len(gallery))
    return rep
