"""Training loop: P x K batches, instruction sampling, task losses, AdamW
with linear warmup, periodic checkpoints and a per-step metrics log."""
from __future__ import annotations

import contextlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig
from .errors import NumericError
from .instructions import Instruction, TaskKind, sample_instruction
from .losses import (match_labels, mine_triplets, t2i_pairs, total_loss_retrieval, total_loss_t2i)
from .model import InstructReID
from .optim import AdamWState, adamw_step, warmup_lr
from .pipeline import encode_instructions, retrieval_features
from .synth import Dataset, augment, pk_batch_sampler
from .tensor import Tape, getitem, l2_normalize


def thread_limits(deterministic: bool):
    """Cap BLAS threads: one in deterministic mode, else ``IRK_THREADS`` if set."""
    limit = 1 if deterministic else os.environ.get("IRK_THREADS")
    if limit is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(limit))


@dataclass
class MetricsLog:
    steps: list = field(default_factory=list)
    reports: dict = field(default_factory=dict)

    def add(self, entry: dict):
        if self.steps and entry["step"] <= self.steps[-1]["step"]:
            raise ValueError("metrics log steps must increase")
        self.steps.append(entry)

    def to_json(self) -> str:
        return json.dumps({"steps": self.steps, "reports": self.reports})


@dataclass
class TrainResult:
    model: InstructReID
    log: MetricsLog
    checkpoints: list
    final_checkpoint: str | None = None


def save_model(path, model: InstructReID, cfg: RunConfig, step: int) -> None:
    meta = {"config": cfg.to_dict(), "step": step}
    checkpoint.save(path, model.state_arrays(), meta)


def load_model(path) -> tuple[InstructReID, RunConfig, dict]:
    arrays, meta = checkpoint.load(path)
    cfg = RunConfig.from_dict(meta["config"])
    dtype = next(iter(arrays.values())).dtype
    model = InstructReID(cfg.model, seed=cfg.seed, dtype=dtype)
    model.load_arrays(arrays)
    return model, cfg, meta


def _task_instructions(task: TaskKind, recs, pool, ds: Dataset, rng) -> list[Instruction]:
    if task in (TaskKind.TRAD, TaskKind.CC, TaskKind.VI):
        # one phrase per mini-batch
        inst = sample_instruction(task, recs[0], rng)
        return [inst] * len(recs)
    if task == TaskKind.CTCC:
        w = ds.config.wardrobe_size
        roles = rng.random(len(recs)) < 0.5
        return [sample_instruction(task, r, rng, role="query" if q else "gallery", wardrobe_size=w)
                for r, q in zip(recs, roles)]
    if task == TaskKind.LI:
        return [sample_instruction(task, r, rng, gallery=pool) for r in recs]
    return [sample_instruction(task, r, rng) for r in recs]


def retrieval_loss(model, ds, recs, pool, task, cfg: RunConfig, rng, cache):
    images = np.stack([augment(ds.image(r), rng, cfg.augment) for r in recs])
    instrs = _task_instructions(task, recs, pool, ds, rng)
    inst = encode_instructions(model, ds, instrs, cache)
    labels = np.array([r.identity for r in recs])
    f, fo = retrieval_features(model, images, inst)
    related = inst.pooled if cfg.triplet == "adaptive" else None
    triplets = mine_triplets(labels, related, cfg.margin, cfg.mining, features=f)
    return total_loss_retrieval(f, fo, labels, triplets, model.id_head, model.id_head_out)


def t2i_loss(model, ds, recs, cfg: RunConfig, rng, cache):
    images = np.stack([augment(ds.image(r), rng, cfg.augment) for r in recs])
    inst = encode_instructions(model, ds, _task_instructions(TaskKind.T2I, recs, None, ds, rng), cache)
    labels = np.array([r.identity for r in recs])
    f = model.image_features(images)
    text = model.text_features(inst.feats, inst.mask)
    img_idx, txt_idx, positive = t2i_pairs(labels, rng)
    paired = inst.take(txt_idx)
    logits = model.match(model.fuse(getitem(f, img_idx), paired.feats, paired.mask))
    return total_loss_t2i(l2_normalize(f), text, logits, match_labels(positive), labels, cfg.temperature)


def train(cfg: RunConfig, ds: Dataset, out_dir=None, log_every: int = 0, dtype=None) -> TrainResult:
    """Run ``cfg.steps`` optimisation steps, round-robin over ``cfg.tasks``."""
    cfg.validate()
    tasks = [TaskKind.parse(t) for t in cfg.tasks]
    rng = np.random.default_rng([cfg.seed, 7])
    model = InstructReID(cfg.model, seed=cfg.seed, dtype=dtype)
    params = model.trainable_parameters()
    opt = AdamWState.for_params(params, lr=cfg.lr, beta1=cfg.betas[0], beta2=cfg.betas[1],
                                eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    pools, samplers = {}, {}
    for t in tasks:
        pools[t] = ds.manifest.select("train", t.value)
        samplers[t] = pk_batch_sampler(pools[t], cfg.P, cfg.K, np.random.default_rng([cfg.seed, 11, len(samplers)]))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log, saved, last_good = MetricsLog(), [], None
    cache: dict = {}
    t0 = time.perf_counter()
    with thread_limits(cfg.deterministic):
        for step in range(cfg.steps):
            task = tasks[step % len(tasks)]
            recs = [pools[task][i] for i in next(samplers[task])]
            lr = warmup_lr(step, cfg.lr, cfg.warmup_start_lr, cfg.warmup_steps)
            with Tape() as tape:
                if task == TaskKind.T2I:
                    loss, terms = t2i_loss(model, ds, recs, cfg, rng, cache)
                else:
                    loss, terms = retrieval_loss(model, ds, recs, pools[task], task, cfg, rng, cache)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at step {step}; last good checkpoint: {last_good}")
            tape.backward(loss, params)
            adamw_step(opt, params, lr=lr)
            entry = {"step": step, "task": task.value, "lr": lr, "loss": value, **terms,
                     "wall": time.perf_counter() - t0}
            log.add(entry)
            if log_every and step % log_every == 0:
                print(json.dumps(entry), flush=True)
            done = step + 1
            if out is not None and (done % cfg.checkpoint_every == 0 or done == cfg.steps):
                path = out / f"ckpt_{done:06d}.irk"
                save_model(path, model, cfg, done)
                saved.append(str(path))
                last_good = str(path)
    final = None
    if out is not None and saved:
        final = str(out / "final.irk")
        Path(final).write_bytes(Path(saved[-1]).read_bytes())
        (out / "metrics.json").write_text(log.to_json())
    return TrainResult(model, log, saved, final)
