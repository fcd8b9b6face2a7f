"""Optimization loop, checkpoint serialization, evaluation, and the
architecture/flag ablation sweep.

Training is deterministic for fixed seeds: data clips are pre-sampled from
the seed, the optimizer walks the parameter registry in its fixed order, and
everything runs in 64-bit on a single thread.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import heads as heads_mod
from . import losses, metrics, scenes
from .config import ModelConfig, RunConfig, TrainConfig
from .model import Model

log = logging.getLogger(__name__)

CKPT_MAGIC = b"STCK"
CKPT_VERSION = 1


class TrainError(Exception):
    pass


# -- optimizer -------------------------------------------------------------


class Adam:
    """Adaptive-moment gradient descent over a name -> Tensor registry."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for k, t in self.params.items():
            g = t.grad
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / bias1
            v_hat = self.v[k] / bias2
            t.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_global_norm(params, max_norm):
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    if max_norm <= 0:
        return 0.0
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float((t.grad ** 2).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for t in params.values():
            if t.grad is not None:
                t.grad *= scale
    return float(norm)


# -- checkpoint ------------------------------------------------------------
# binary layout (little-endian):
#   magic "STCK" | u32 version | u64 config-yaml length | yaml bytes
#   u64 step | u64 n_entries
#   per entry: u32 name-length | name utf8 | u8 ndim | u64 dims... | f64 payload
# entries are the registry parameters followed by adam m/ and v/ slots.


def save_checkpoint(path, model: Model, opt: Adam, run_cfg: RunConfig, step):
    from .config import _to_dict
    import yaml

    blob = yaml.safe_dump(
        {"model": _to_dict(run_cfg.model), "train": _to_dict(run_cfg.train)},
        sort_keys=True,
    ).encode()
    entries = [(name, t.data) for name, t in model.parameters().items()]
    entries += [(f"adam.m.{k}", v) for k, v in opt.m.items()]
    entries += [(f"adam.v.{k}", v) for k, v in opt.v.items()]
    entries.append(("adam.step", np.array([float(opt.step_count)])))
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(struct.pack("<QQ", step, len(entries)))
        for name, arr in entries:
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path):
    """Returns (run_cfg, step, {name: array})."""
    import yaml
    from .config import ModelConfig, TrainConfig, RunConfig

    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise TrainError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CKPT_VERSION:
            raise TrainError(f"{path}: unsupported checkpoint version {version}")
        (blen,) = struct.unpack("<Q", f.read(8))
        data = yaml.safe_load(f.read(blen).decode())
        run_cfg = RunConfig(
            model=ModelConfig(**data["model"]), train=TrainConfig(**data["train"])
        )
        step, n = struct.unpack("<QQ", f.read(16))
        tensors = {}
        for _ in range(n):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode()
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if shape else 1
            tensors[name] = np.frombuffer(
                f.read(8 * count), dtype="<f8"
            ).reshape(shape).copy()
    return run_cfg, step, tensors


def load_checkpoint(path):
    """Rebuild the model and optimizer exactly as saved."""
    run_cfg, step, tensors = read_checkpoint(path)
    model = Model(run_cfg.model, seed=run_cfg.train.seed)
    opt = Adam(
        model.parameters(), run_cfg.train.lr, run_cfg.train.beta1,
        run_cfg.train.beta2, run_cfg.train.adam_eps,
    )
    missing = set(model.parameters()) - set(tensors)
    if missing:
        raise TrainError(f"{path}: checkpoint missing parameters {sorted(missing)[:5]}")
    for name, t in model.parameters().items():
        if tensors[name].shape != t.data.shape:
            raise TrainError(
                f"{path}: shape mismatch for {name}: "
                f"{tensors[name].shape} vs {t.data.shape}"
            )
        t.data[...] = tensors[name]
        opt.m[name][...] = tensors[f"adam.m.{name}"]
        opt.v[name][...] = tensors[f"adam.v.{name}"]
    opt.step_count = int(tensors["adam.step"][0])
    return model, opt, run_cfg, step


# -- data ------------------------------------------------------------------


def sample_training_clips(model: Model, tcfg: TrainConfig):
    """Pre-sample the clip pool and render all GT maps once."""
    cfg = model.cfg
    clips = []
    for i in range(tcfg.num_clips):
        clip = scenes.sample_clip(
            model.template,
            seed=tcfg.seed * 10_000 + i,
            num_frames=tcfg.num_frames,
            n_persons=tcfg.n_persons,
            motion_amplitude=tcfg.motion_amplitude,
            image_hw=(cfg.image_h, cfg.image_w),
        )
        gts = []
        for persons in clip.frames:
            gt_persons = [
                losses.GroundTruthPerson(params=p.params, joints=p.joints)
                for p in persons
            ]
            gts.append(
                losses.render_targets(
                    gt_persons, cfg.grid, clip.camera, model.cell_px, sigma=cfg.sigma
                )
            )
        clips.append((clip, gts))
    return clips


# -- training --------------------------------------------------------------


@dataclass
class TrainResult:
    model: Model
    opt: Adam
    history: list = field(default_factory=list)  # (step, terms dict)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    steps_run: int = 0


def clip_loss(model: Model, clip, gts, weights: losses.LossWeights, prior=None):
    """Mean per-frame total loss over one clip; returns (Tensor, terms)."""
    out = model.forward(clip.rasters)
    total = None
    agg = {}
    for t, maps in enumerate(out.maps):
        lt, terms = losses.total_loss(
            maps, gts[t], weights, model.template, clip.camera, model.cell_px,
            prior=prior,
        )
        total = lt if total is None else total + lt
        for k, v in terms.items():
            agg[k] = agg.get(k, 0.0) + v / len(out.maps)
    return total * (1.0 / len(out.maps)), agg


def train(model: Model, run_cfg: RunConfig, opt: Adam = None, start_step=0,
          loss_csv=None, callback=None):
    """Optimize the model on its seed-derived clip pool.

    NaN/inf loss aborts with the offending clip seed in the message.
    ``early_stop_loss`` > 0 stops once the total drops below it.
    """
    tcfg = run_cfg.train
    weights = losses.LossWeights(tcfg.w_pose, tcfg.w_mesh, tcfg.w_j, tcfg.w_p)
    prior = losses.GaussianMixturePrior.identity_default()
    clips = sample_training_clips(model, tcfg)
    params = model.parameters()
    if opt is None:
        opt = Adam(params, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    result = TrainResult(model=model, opt=opt)

    writer = None
    if loss_csv is not None:
        fh = open(loss_csv, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "term", "value"])

    try:
        for step in range(start_step, tcfg.steps):
            clip, gts = clips[step % len(clips)]
            ad.reset_tape()
            total, terms = clip_loss(model, clip, gts, weights, prior)
            value = float(total.data)
            if not np.isfinite(value):
                raise TrainError(
                    f"non-finite loss {value} at step {step} "
                    f"(clip seed {clip.seed}); aborting"
                )
            if step == start_step:
                result.initial_loss = value
            ad.zero_grad(params.values())
            ad.backward(total)
            clip_global_norm(params, tcfg.grad_clip)
            if tcfg.lr > 0:
                frac = step / max(tcfg.steps - 1, 1)
                opt.lr = tcfg.lr * (1.0 - (1.0 - tcfg.lr_final_factor) * frac)
                opt.step()
            result.history.append((step, terms))
            result.final_loss = value
            result.steps_run = step + 1
            if writer is not None:
                for k, v in sorted(terms.items()):
                    writer.writerow([step, k, f"{v:.17g}"])
            if tcfg.log_every and step % tcfg.log_every == 0:
                log.info("step %d loss %.6f", step, value)
            if callback is not None:
                callback(step, value)
            if 0 < tcfg.early_stop_loss and value <= tcfg.early_stop_loss:
                log.info("early stop at step %d (loss %.6f)", step, value)
                break
    finally:
        if writer is not None:
            fh.close()
    return result


# -- evaluation ------------------------------------------------------------


def evaluate_clip(model: Model, clip, gts):
    """Match detections to GT per frame and accumulate raw errors."""
    out = model.forward(clip.rasters)
    ad.reset_tape()
    rows = {
        "mpjpe": [], "pa_mpjpe": [], "mpve": [],
        "pcdr_correct": 0, "pcdr_total": 0,
        "detected": 0, "total": 0, "false_positives": 0,
    }
    for t, maps in enumerate(out.maps):
        gt = gts[t]
        decoded = model.detect(maps, clip.camera)
        gt_centers = [(p.center_cell[1], p.center_cell[0]) for p in gt.persons]
        pred_centers = [d.grid_pos for d, _, _ in decoded]
        mr = metrics.match(
            gt_centers, pred_centers, [d.score for d, _, _ in decoded],
            gt=list(range(len(gt.persons))), pred=list(range(len(decoded))),
        )
        rows["total"] += len(gt.persons)
        rows["detected"] += len(mr.pairs)
        rows["false_positives"] += mr.false_positives
        gt_depth, pred_depth = [], []
        for pair in mr.pairs:
            person = gt.persons[pair.gt]
            det, mesh_p, joints_p = decoded[pair.pred]
            rows["mpjpe"].append(metrics.mpjpe(person.joints, joints_p))
            rows["pa_mpjpe"].append(metrics.pa_mpjpe(person.joints, joints_p))
            gt_mesh, _ = _gt_mesh(model, person)
            rows["mpve"].append(
                metrics.mpve(gt_mesh, mesh_p, gt_root=person.joints[0], pred_root=joints_p[0])
            )
            gt_depth.append(person.joints[0, 2])
            pred_depth.append(det.depth)
        if len(gt_depth) >= 2:
            pct = metrics.pcdr(gt_depth, pred_depth)
            pairs = len(gt_depth) * (len(gt_depth) - 1) // 2
            rows["pcdr_correct"] += pct / 100.0 * pairs
            rows["pcdr_total"] += pairs
    return rows


def _gt_mesh(model: Model, person):
    from . import body as body_model

    mesh, joints = body_model.forward(model.template, person.params)
    return mesh.data, joints.data


def evaluate(model: Model, run_cfg: RunConfig, eval_seeds):
    """Aggregate metric rows over clips sampled from the eval seeds."""
    tcfg = run_cfg.train
    cfg = model.cfg
    agg = None
    for seed in eval_seeds:
        clip = scenes.sample_clip(
            model.template, seed=seed, num_frames=tcfg.num_frames,
            n_persons=tcfg.n_persons, motion_amplitude=tcfg.motion_amplitude,
            image_hw=(cfg.image_h, cfg.image_w),
        )
        gts = []
        for persons in clip.frames:
            gt_persons = [
                losses.GroundTruthPerson(params=p.params, joints=p.joints)
                for p in persons
            ]
            gts.append(losses.render_targets(
                gt_persons, cfg.grid, clip.camera, model.cell_px, sigma=cfg.sigma))
        rows = evaluate_clip(model, clip, gts)
        if agg is None:
            agg = rows
        else:
            for k in ("mpjpe", "pa_mpjpe", "mpve"):
                agg[k].extend(rows[k])
            for k in ("pcdr_correct", "pcdr_total", "detected", "total", "false_positives"):
                agg[k] += rows[k]
    return summarize(agg)


def summarize(agg):
    """Metric rows (name, value-or-None, count) from accumulated errors."""
    det, tot = agg["detected"], agg["total"]
    mean = lambda xs: float(np.mean(xs)) if xs else None
    mpj, pam, mpv = mean(agg["mpjpe"]), mean(agg["pa_mpjpe"]), mean(agg["mpve"])
    if det > 0 and tot > 0:
        nmve, nmje = metrics.normalized_errors(mpv, mpj, det, tot)
    else:
        nmve = nmje = None
    pcdr_val = (
        100.0 * agg["pcdr_correct"] / agg["pcdr_total"] if agg["pcdr_total"] else None
    )
    recall = 100.0 * det / tot if tot else None
    return [
        ("mpjpe_mm", mpj, len(agg["mpjpe"])),
        ("pa_mpjpe_mm", pam, len(agg["pa_mpjpe"])),
        ("mpve_mm", mpv, len(agg["mpve"])),
        ("nmje_mm", nmje, det),
        ("nmve_mm", nmve, det),
        ("pcdr_pct", pcdr_val, agg["pcdr_total"]),
        ("recall_pct", recall, tot),
        ("misses", float(tot - det), tot),
        ("false_positives", float(agg["false_positives"]), det),
    ]


# -- ablation sweep --------------------------------------------------------


def ablation_rows(base: ModelConfig):
    """The 8 sweep rows: 4 decoder variants, then the full pose-guided model
    with each of the three shape-decoder components removed plus the intact
    reference row."""
    rows = []
    for variant in ("conv", "split_posh", "pga", "progressive_pga"):
        rows.append((variant, replace(base, variant=variant,
                                      use_ta=True, use_wpsa=True, use_wssa=True)))
    full = replace(base, variant="progressive_pga")
    rows.append(("progressive_pga_no_ta", replace(full, use_ta=False)))
    rows.append(("progressive_pga_no_wpsa", replace(full, use_wpsa=False)))
    rows.append(("progressive_pga_no_wssa", replace(full, use_wssa=False)))
    rows.append(("progressive_pga_full", full))
    return rows


def ablate(run_cfg: RunConfig, out_csv=None, loss_csv_dir=None):
    """Train every sweep row on identical seeds; returns list of row dicts."""
    import os

    results = []
    for label, mcfg in ablation_rows(run_cfg.model):
        model = Model(mcfg, seed=run_cfg.train.seed)
        sub = RunConfig(model=mcfg, train=run_cfg.train)
        loss_csv = (
            os.path.join(loss_csv_dir, f"loss_{label}.csv") if loss_csv_dir else None
        )
        tr = train(model, sub, loss_csv=loss_csv)
        metric_rows = dict(
            (name, value) for name, value, _ in
            evaluate(model, sub, [run_cfg.train.seed * 10_000 + 9_999])
        )
        results.append({
            "variant": label,
            "use_ta": mcfg.use_ta, "use_wpsa": mcfg.use_wpsa, "use_wssa": mcfg.use_wssa,
            "final_loss": tr.final_loss, "initial_loss": tr.initial_loss,
            "pa_mpjpe_mm": metric_rows["pa_mpjpe_mm"],
            "mpjpe_mm": metric_rows["mpjpe_mm"],
            "mpve_mm": metric_rows["mpve_mm"],
            "history": tr.history,
        })
        if not np.isfinite(tr.final_loss):
            raise TrainError(f"ablation row {label} diverged (loss {tr.final_loss})")
    if out_csv is not None:
        write_ablation_csv(out_csv, results)
    return results


def write_ablation_csv(path, results):
    cols = ["variant", "use_ta", "use_wpsa", "use_wssa",
            "final_loss", "pa_mpjpe_mm", "mpjpe_mm", "mpve_mm"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for r in results:
            w.writerow([
                r["variant"], int(r["use_ta"]), int(r["use_wpsa"]), int(r["use_wssa"]),
                f"{r['final_loss']:.17g}",
                *("" if r[k] is None else f"{r[k]:.6f}"
                  for k in ("pa_mpjpe_mm", "mpjpe_mm", "mpve_mm")),
            ])
