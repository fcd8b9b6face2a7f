#!/usr/bin/env python3
"""Overfit the full model on a small fixed clip pool and report training-set
metrics.  Reproduces the toy regression setup used in the test suite.

Usage: python scripts/overfit_toy.py [--steps N] [--seed S] [--out DIR]
"""

import argparse
import os
import time

from stmesh import trainer
from stmesh.config import ModelConfig, RunConfig, TrainConfig
from stmesh.model import Model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--clips", type=int, default=8)
    ap.add_argument("--early-stop-ratio", type=float, default=0.0,
                    help="stop when loss <= ratio * initial (0 disables)")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    mcfg = ModelConfig()
    tcfg = TrainConfig(steps=args.steps, seed=args.seed, num_clips=args.clips,
                       num_frames=4, n_persons=2, lr_final_factor=0.05,
                       w_mesh=50.0)
    run = RunConfig(model=mcfg, train=tcfg)
    model = Model(mcfg, seed=args.seed)
    print(f"trainable scalars: {model.count_params()}")

    stop = {"initial": None}

    def watch(step, value):
        if stop["initial"] is None:
            stop["initial"] = value
        if args.early_stop_ratio > 0 and value <= args.early_stop_ratio * stop["initial"]:
            run.train.early_stop_loss = value + 1.0  # trip the trainer's check

    t0 = time.time()
    loss_csv = None
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        loss_csv = os.path.join(args.out, "loss.csv")
    result = trainer.train(model, run, loss_csv=loss_csv, callback=watch)
    dt = time.time() - t0
    print(f"{result.steps_run} steps in {dt:.1f} s "
          f"({dt / max(result.steps_run, 1):.2f} s/step)")
    print(f"loss {result.initial_loss:.3f} -> {result.final_loss:.3f} "
          f"(ratio {result.final_loss / result.initial_loss:.4f})")

    clips = trainer.sample_training_clips(model, tcfg)
    agg = None
    for clip, gts in clips:
        rows = trainer.evaluate_clip(model, clip, gts)
        if agg is None:
            agg = rows
        else:
            for k in ("mpjpe", "pa_mpjpe", "mpve"):
                agg[k].extend(rows[k])
            for k in ("pcdr_correct", "pcdr_total", "detected", "total",
                      "false_positives"):
                agg[k] += rows[k]
    for name, value, count in trainer.summarize(agg):
        print(f"  {name:18s} {'-' if value is None else f'{value:10.3f}'} (n={count})")
    if args.out:
        trainer.save_checkpoint(os.path.join(args.out, "model.ckpt"),
                                model, result.opt, run, result.steps_run)


if __name__ == "__main__":
    main()
