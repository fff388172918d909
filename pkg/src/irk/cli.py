"""Command-line verbs: train, eval, gradcheck, synth, retrieve.

Every command prints JSON on success and exits 0; failures print one
JSON line ``{"error": ..., "message": ...}`` to stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from .checks import TOLERANCE, run_gradcheck
from .config import TASKS, RunConfig, desk_config
from .errors import IRKError
from .instructions import Instruction, TaskKind
from .metrics import cosine_scores, rank_gallery
from .pipeline import FEATURES, embed_records, eval_instruction, evaluate_task
from .synth import Dataset, dataset_checksum, generate_dataset, load_dataset, read_image
from .train import load_model, thread_limits, train


def _emit(obj, out: str | None = None) -> None:
    text = json.dumps(obj, indent=1)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    print(text)


def _tasks(value: str | None):
    if value is None:
        return None
    return TASKS if value == "all" else (value,)


def build_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else desk_config()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "deterministic", False):
        changes["deterministic"] = True
    if _tasks(getattr(args, "task", None)):
        changes["tasks"] = _tasks(args.task)
    if getattr(args, "steps", None) is not None:
        changes["steps"] = args.steps
    if changes.get("tasks"):
        data_tasks = tuple(sorted(set(cfg.data.tasks) | set(changes["tasks"]), key=TASKS.index))
        changes["data"] = dataclasses.replace(cfg.data, tasks=data_tasks)
    return cfg.replace(**changes) if changes else cfg.validate()


def _dataset(cfg: RunConfig, data_dir: str | None) -> Dataset:
    if data_dir:
        return load_dataset(data_dir)
    return generate_dataset(cfg.data)


def cmd_train(args) -> int:
    cfg = build_config(args)
    ds = _dataset(cfg, args.data)
    out = Path(args.out or cfg.out_dir)
    t0 = time.perf_counter()
    res = train(cfg, ds, out_dir=out, log_every=args.log_every)
    steps = res.log.steps
    summary = {"final_checkpoint": res.final_checkpoint, "checkpoints": res.checkpoints,
               "steps": len(steps), "first_loss": steps[0]["loss"] if steps else None,
               "last_loss": steps[-1]["loss"] if steps else None,
               "seconds": time.perf_counter() - t0, "metrics": str(out / "metrics.json")}
    _emit(summary)
    return 0


def cmd_eval(args) -> int:
    model, cfg, _ = load_model(args.checkpoint)
    ds = _dataset(cfg, args.data)
    task = TaskKind.parse(args.task or cfg.tasks[0]).value
    with thread_limits(cfg.deterministic or args.deterministic):
        report = evaluate_task(model, ds, task, mode=args.mode, policy=args.policy,
                               sweep=args.sweep, feature=args.feature)
    if args.csv:
        Path(args.csv).write_text(report.per_query_csv())
    _emit(report.to_dict(), args.out)
    return 0


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    results = run_gradcheck(seed=args.seed or 0)
    table = [{"case": r.name, "max_rel_error": r.max_rel_error, "entries": r.entries,
              "seconds": round(r.seconds, 3), "passed": r.passed} for r in results]
    ok = all(r.passed for r in results)
    _emit({"tolerance": TOLERANCE, "passed": ok, "seconds": time.perf_counter() - t0,
           "results": table}, args.out)
    return 0 if ok else 1


def cmd_synth(args) -> int:
    cfg = build_config(args)
    data = cfg.data
    if args.seed is not None:
        data = dataclasses.replace(data, seed=args.seed)
    if args.inline:
        data = dataclasses.replace(data, inline=True)
    out = args.out or cfg.data_dir
    ds = generate_dataset(data.validate(), out)
    counts = {}
    for r in ds.manifest.records:
        counts[f"{r.split}/{r.task}"] = counts.get(f"{r.split}/{r.task}", 0) + 1
    _emit({"out": str(out), "records": len(ds.manifest), "counts": counts,
           "sha256": dataset_checksum(out)})
    return 0


def cmd_retrieve(args) -> int:
    model, cfg, _ = load_model(args.checkpoint)
    ds = _dataset(cfg, args.data)
    task = TaskKind.parse(args.task).value
    if task == "t2i":
        raise IRKError("retrieve handles image queries; evaluate text-to-image with `eval --task t2i`")
    gallery = ds.manifest.select("gallery", task)
    if not gallery:
        raise IRKError(f"manifest has no {task} gallery")
    query = read_image(args.query)
    if task == "ctcc":
        if not args.template:
            raise IRKError("ctcc retrieval needs --template")
        inst = _TemplateInstruction(read_image(args.template))
    else:
        if not args.instruction:
            raise IRKError(f"{task} retrieval needs --instruction")
        inst = Instruction(task, text=tuple(args.instruction))
    with thread_limits(cfg.deterministic):
        g_inst = [eval_instruction(task, r, ds, "gallery", args.instruction[0] if args.instruction else None)
                  for r in gallery]
        gf = embed_records(model, ds, gallery, g_inst, feature=args.feature)
        qf = _embed_query(model, ds, query, inst, args.feature)
    scores = cosine_scores(qf, gf)[0]
    order = rank_gallery(scores)[:max(args.top, 0)]
    _emit({"task": task, "results": [{"uid": gallery[i].uid, "identity": gallery[i].identity,
                                      "score": float(scores[i])} for i in order]}, args.out)
    return 0


class _TemplateInstruction:
    """A clothes template given directly as pixels."""

    def __init__(self, image):
        self.image = np.asarray(image)


def _embed_query(model, ds, image, inst, feature):
    from .encoders import pool_instruction
    from .pipeline import InstructionFeatures, encode_instructions, retrieval_features
    from .tensor import no_grad
    with no_grad():
        if isinstance(inst, _TemplateInstruction):
            feats = model.encode_templates(inst.image[None])
            ifeat = InstructionFeatures(feats, None, pool_instruction(feats.data))
        else:
            ifeat = encode_instructions(model, ds, [inst], {})
        f, fo = retrieval_features(model, image[None], ifeat)
    return np.asarray((f if feature == "cls" else fo).data, dtype=np.float64)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="irk", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, task=True):
        sp.add_argument("--config", help="JSON run config; flags override its values")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--deterministic", action="store_true")
        sp.add_argument("--out", help="output path (JSON report or directory)")
        if task:
            sp.add_argument("--task", choices=TASKS + ("all",))

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--data", help="dataset directory from `synth`; default renders in memory")
    t.add_argument("--steps", type=int)
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--mode", choices=("vis2ir", "ir2vis"), default="vis2ir")
    e.add_argument("--policy", choices=("standard", "none"))
    e.add_argument("--feature", choices=FEATURES, default="cls")
    e.add_argument("--sweep", action="store_true", help="average over every bank phrase")
    e.add_argument("--csv", help="write per-query AP as CSV")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every loss and layer")
    common(g, task=False)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    common(s)
    s.add_argument("--inline", action="store_true", help="store seeds only, no image files")
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("retrieve", help="rank a gallery for one query image")
    common(r, task=False)
    r.add_argument("--task", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--query", required=True, help="query image file (raw float with shape header)")
    r.add_argument("--instruction", nargs="+", help="instruction sentence(s)")
    r.add_argument("--template", help="clothes template image file for ctcc")
    r.add_argument("--data")
    r.add_argument("--top", type=int, default=10)
    r.add_argument("--feature", choices=FEATURES, default="cls")
    r.set_defaults(func=cmd_retrieve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (IRKError, ValueError, ArithmeticError, OSError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else repr(exc)
        print(json.dumps({"error": type(exc).__name__, "message": msg}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
