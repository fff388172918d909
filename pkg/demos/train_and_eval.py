"""Train at desk scale on one task and compare retrieval before and after.

    python3 demos/train_and_eval.py --task trad --steps 200
"""
import argparse
import time

from irk.config import DataConfig, desk_config
from irk.model import InstructReID
from irk.pipeline import evaluate_task
from irk.synth import generate_dataset
from irk.train import train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--task", default="trad")
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = desk_config(tasks=(args.task,), steps=args.steps, seed=args.seed)
    cfg = cfg.replace(data=DataConfig(seed=args.seed, tasks=(args.task,)))
    ds = generate_dataset(cfg.data)
    print(f"{len(ds.manifest.select('train', args.task))} training images, task {args.task}")

    before = evaluate_task(InstructReID(cfg.model, seed=args.seed), ds, args.task)
    t0 = time.perf_counter()
    res = train(cfg, ds, log_every=max(1, args.steps // 5))
    after = evaluate_task(res.model, ds, args.task)

    print(f"trained {args.steps} steps in {time.perf_counter() - t0:.0f} s")
    print(f"mAP    {before.mAP:.3f} -> {after.mAP:.3f}")
    print(f"rank-1 {before.cmc[0]:.3f} -> {after.cmc[0]:.3f}")
    if "instruction_hit_rate" in after.extra:
        print(f"instruction hit rate {after.extra['instruction_hit_rate']:.3f}")


if __name__ == "__main__":
    main()
