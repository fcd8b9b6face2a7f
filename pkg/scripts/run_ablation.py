#!/usr/bin/env python3
"""Train every architecture/flag sweep row on shared seeds and write the
comparison table plus loss-curve plots.

Usage: python scripts/run_ablation.py [--steps N] [--seed S] [--out DIR]
"""

import argparse

from stmesh.cli import main as cli_main


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--image", type=int, default=32)
    ap.add_argument("--frames", type=int, default=2)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    argv = [
        "ablate",
        "--seed", str(args.seed),
        "--out", args.out,
        "--set", f"train.steps={args.steps}",
        "--set", f"train.num_frames={args.frames}",
        "--set", f"model.dim={args.dim}",
        "--set", f"model.image_h={args.image}",
        "--set", f"model.image_w={args.image}",
        "--set", "model.num_vertices=302",
        "--set", "model.head_hidden=32",
        "--set", "model.enc_layers=1",
    ]
    raise SystemExit(cli_main(argv))


if __name__ == "__main__":
    main()
