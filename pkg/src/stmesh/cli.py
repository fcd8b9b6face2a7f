"""Command-line harness: data generation, training, evaluation, inference,
gradient checking, the ablation sweep, and parameter counting.

Every subcommand honors --seed and writes a run manifest (config snapshot,
seeds, source content hash, output paths) into its artifact directory.
Exit codes: 0 success, 1 validation/check failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import gradchecks, heads as heads_mod, losses, metrics, scenes, trainer
from .config import ConfigError, RunConfig, load_config, save_config
from .model import Model

log = logging.getLogger(__name__)

OUT_ROOT_ENV = "STMESH_OUT"


def source_hash():
    """Stable hash of the package source files."""
    pkg_dir = os.path.dirname(os.path.abspath(__file__))
    digest = hashlib.sha256()
    for name in sorted(os.listdir(pkg_dir)):
        if name.endswith(".py"):
            with open(os.path.join(pkg_dir, name), "rb") as f:
                digest.update(name.encode())
                digest.update(f.read())
    return digest.hexdigest()[:16]


def write_manifest(out_dir, cfg: RunConfig, seed, outputs):
    import dataclasses

    manifest = {
        "config": {
            "model": dataclasses.asdict(cfg.model),
            "train": dataclasses.asdict(cfg.train),
        },
        "seed": seed,
        "source_hash": source_hash(),
        "outputs": sorted(outputs),
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)


def _out_dir(args, default_leaf):
    root = args.out or os.environ.get(OUT_ROOT_ENV, "runs")
    path = os.path.join(root, default_leaf) if args.out is None else args.out
    os.makedirs(path, exist_ok=True)
    return path


def _load_cfg(args):
    overrides = list(args.set or [])
    cfg = load_config(args.config, overrides)
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def _plot_loss_curves(history_by_label, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for label, history in history_by_label.items():
        steps = [s for s, _ in history]
        vals = [t["total"] for _, t in history]
        ax.plot(steps, vals, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# -- subcommands -----------------------------------------------------------


def cmd_gen_data(args):
    cfg = _load_cfg(args)
    out = _out_dir(args, "data")
    model_cfg, tcfg = cfg.model, cfg.train
    from . import body as body_model

    template = body_model.build_default_template(
        num_vertices=model_cfg.num_vertices, seed=model_cfg.template_seed
    )
    outputs = []
    for i in range(args.num_clips):
        clip = scenes.sample_clip(
            template,
            seed=tcfg.seed * 10_000 + i,
            num_frames=tcfg.num_frames,
            n_persons=tcfg.n_persons,
            motion_amplitude=tcfg.motion_amplitude,
            image_hw=(model_cfg.image_h, model_cfg.image_w),
        )
        clip_dir = os.path.join(out, f"clip_{i:04d}")
        scenes.save_clip(clip, clip_dir)
        outputs.append(clip_dir)
    write_manifest(out, cfg, tcfg.seed, outputs)
    print(f"wrote {args.num_clips} clips to {out}")
    return 0


def cmd_train(args):
    cfg = _load_cfg(args)
    out = _out_dir(args, "train")
    model = Model(cfg.model, seed=cfg.train.seed)
    opt, start_step = None, 0
    if args.resume:
        model, opt, cfg_ckpt, start_step = trainer.load_checkpoint(args.resume)
        cfg.model = cfg_ckpt.model
    loss_csv = os.path.join(out, "loss.csv")
    result = trainer.train(model, cfg, opt=opt, start_step=start_step, loss_csv=loss_csv)
    ckpt = os.path.join(out, "model.ckpt")
    trainer.save_checkpoint(ckpt, model, result.opt, cfg, result.steps_run)
    plot = os.path.join(out, "loss.png")
    _plot_loss_curves({"train": result.history}, plot)
    save_config(cfg, os.path.join(out, "config.yaml"))
    write_manifest(out, cfg, cfg.train.seed, [loss_csv, ckpt, plot])
    print(
        f"trained {result.steps_run} steps: loss "
        f"{result.initial_loss:.4f} -> {result.final_loss:.4f}; checkpoint {ckpt}"
    )
    return 0


def cmd_eval(args):
    cfg = _load_cfg(args)
    out = _out_dir(args, "eval")
    model, _, cfg_ckpt, _ = trainer.load_checkpoint(args.checkpoint)
    cfg.model = cfg_ckpt.model
    eval_seeds = [cfg.train.seed * 10_000 + 5_000 + i for i in range(args.num_clips)]
    rows = trainer.evaluate(model, cfg, eval_seeds)
    csv_path = os.path.join(out, "metrics.csv")
    metrics.write_metrics_csv(csv_path, rows)
    write_manifest(out, cfg, cfg.train.seed, [csv_path])
    for name, value, count in rows:
        print(f"{name:18s} {'-' if value is None else f'{value:10.3f}'}  (n={count})")
    return 0


def cmd_infer(args):
    cfg = _load_cfg(args)
    out = _out_dir(args, "infer")
    model, _, cfg_ckpt, _ = trainer.load_checkpoint(args.checkpoint)
    cfg.model = cfg_ckpt.model

    clip_dirs = sorted(
        os.path.join(args.clips, d)
        for d in os.listdir(args.clips)
        if os.path.isdir(os.path.join(args.clips, d))
    ) if os.path.isdir(args.clips) else []
    outputs = []
    total_dets = 0
    for clip_dir in clip_dirs:
        clip = scenes.load_clip(clip_dir, model.template)
        result = model.forward(clip.rasters)
        from . import autodiff as ad

        ad.reset_tape()
        per_frame = []
        mesh_rows = []
        for t, maps in enumerate(result.maps):
            decoded = model.detect(maps, clip.camera)
            per_frame.append([d for d, _, _ in decoded])
            for i, (det, mesh, joints) in enumerate(decoded):
                mesh_rows.append((t, i, mesh))
            total_dets += len(decoded)
        leaf = os.path.basename(clip_dir.rstrip("/"))
        det_path = os.path.join(out, f"{leaf}_detections.txt")
        heads_mod.write_detections(det_path, per_frame)
        mesh_path = os.path.join(out, f"{leaf}_meshes.f64")
        with open(mesh_path, "wb") as f:
            for t, i, mesh in mesh_rows:
                np.asarray(mesh, dtype="<f8").tofile(f)
        outputs += [det_path, mesh_path]
    summary = os.path.join(out, "summary.csv")
    with open(summary, "w") as f:
        f.write("clips,detections\n")
        f.write(f"{len(clip_dirs)},{total_dets}\n")
    outputs.append(summary)
    write_manifest(out, cfg, cfg.train.seed, outputs)
    print(f"{len(clip_dirs)} clips, {total_dets} detections -> {out}")
    return 0


def cmd_gradcheck(args):
    ok, rows = gradchecks.run(scope=args.scope, tolerance=args.tolerance)
    for name, err, row_ok in rows:
        print(f"{name:35s} {err:.3e}  {'ok' if row_ok else 'FAIL'}")
    if not rows:
        print(f"no registered suite matches scope {args.scope!r}", file=sys.stderr)
        return 1
    print(f"{sum(r[2] for r in rows)}/{len(rows)} suites within {args.tolerance:g}")
    return 0 if ok else 1


def cmd_ablate(args):
    cfg = _load_cfg(args)
    out = _out_dir(args, "ablate")
    csv_path = os.path.join(out, "ablation.csv")
    results = trainer.ablate(cfg, out_csv=csv_path, loss_csv_dir=out)
    plot = os.path.join(out, "ablation_loss.png")
    _plot_loss_curves({r["variant"]: r["history"] for r in results}, plot)
    write_manifest(out, cfg, cfg.train.seed, [csv_path, plot])
    for r in results:
        print(
            f"{r['variant']:28s} loss {r['initial_loss']:.3f} -> {r['final_loss']:.3f}"
        )
    print(f"table -> {csv_path}")
    return 0


def cmd_count_params(args):
    cfg = _load_cfg(args)
    model = Model(cfg.model, seed=cfg.train.seed)
    if args.per_module:
        groups = {}
        for name, t in model.parameters().items():
            groups.setdefault(name.split(".")[0], 0)
            groups[name.split(".")[0]] += int(np.prod(t.shape))
        for g, n in sorted(groups.items()):
            print(f"{g:16s} {n}")
    print(model.count_params())
    return 0


# -- parser ----------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(
        prog="stmesh",
        description="Multi-person video-to-mesh toolkit: synthetic data, "
        "training, evaluation, and ablations.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="YAML config file")
        sp.add_argument(
            "--set", action="append", metavar="KEY=VALUE",
            help="dotted config override, e.g. model.dim=32 (repeatable)",
        )
        sp.add_argument("--seed", type=int, default=None, help="override train.seed")
        sp.add_argument("--out", default=None,
                        help=f"output directory (default <${OUT_ROOT_ENV}|runs>/<cmd>)")

    sp = sub.add_parser("gen-data", help="write synthetic clips to disk")
    common(sp)
    sp.add_argument("--num-clips", type=int, default=4, help="clips to generate")
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="optimize a model on seed-derived clips")
    common(sp)
    sp.add_argument("--resume", default=None, help="checkpoint to resume from")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="run metrics on held-out clips")
    common(sp)
    sp.add_argument("checkpoint", help="trained checkpoint path")
    sp.add_argument("--num-clips", type=int, default=4, help="eval clips")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("infer", help="detections + mesh dumps for saved clips")
    common(sp)
    sp.add_argument("checkpoint", help="trained checkpoint path")
    sp.add_argument("clips", help="directory of saved clip directories")
    sp.set_defaults(fn=cmd_infer)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    common(sp)
    sp.add_argument("--scope", default="all",
                    help="'all' or a substring of registered suite names")
    sp.add_argument("--tolerance", type=float, default=gradchecks.DEFAULT_TOLERANCE,
                    help="max allowed gradient error")
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="train all architecture/flag sweep rows")
    common(sp)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("count-params", help="trainable scalar count")
    common(sp)
    sp.add_argument("--per-module", action="store_true",
                    help="also print per-module subtotals")
    sp.set_defaults(fn=cmd_count_params)
    return p


def main(argv=None):
    logging.basicConfig(level=os.environ.get("STMESH_LOGLEVEL", "WARNING"))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, trainer.TrainError, scenes.SceneError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
