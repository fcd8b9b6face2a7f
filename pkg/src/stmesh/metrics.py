"""Evaluation metrics: MPJPE, PA-MPJPE (similarity Procrustes), MPVE,
recall-normalized errors, depth-ordering accuracy, and GT-prediction
matching.

All joint/vertex inputs are meters in camera space; errors are reported in
millimeters.  MPJPE/MPVE root-align both point sets (3DPW-style protocol,
switchable); PA-MPJPE applies the closed-form similarity alignment with the
reflection branch excluded.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

M_TO_MM = 1000.0


@dataclass
class EvalPair:
    gt: object
    pred: object
    gt_joints: np.ndarray = None
    pred_joints: np.ndarray = None
    gt_vertices: np.ndarray = None
    pred_vertices: np.ndarray = None


@dataclass
class MatchResult:
    pairs: list[EvalPair] = field(default_factory=list)
    misses: int = 0
    false_positives: int = 0


def match(gt_centers, pred_centers, pred_scores=None, radius_cells=2.0, gt=None, pred=None):
    """Greedy nearest-center matching: predictions in descending score order
    each claim the nearest unmatched GT within the radius."""
    gt_centers = np.asarray(gt_centers, dtype=np.float64).reshape(-1, 2)
    pred_centers = np.asarray(pred_centers, dtype=np.float64).reshape(-1, 2)
    n_gt, n_pred = len(gt_centers), len(pred_centers)
    if pred_scores is None:
        pred_scores = np.zeros(n_pred)
    order = np.argsort(-np.asarray(pred_scores), kind="stable")
    taken = np.zeros(n_gt, dtype=bool)
    result = MatchResult()
    for pi in order:
        if n_gt == 0:
            break
        d = np.linalg.norm(gt_centers - pred_centers[pi], axis=1)
        d[taken] = np.inf
        gi = int(np.argmin(d))
        if d[gi] <= radius_cells:
            taken[gi] = True
            result.pairs.append(
                EvalPair(
                    gt=gt[gi] if gt is not None else gi,
                    pred=pred[pi] if pred is not None else int(pi),
                )
            )
    result.misses = int((~taken).sum())
    result.false_positives = n_pred - len(result.pairs)
    return result


def _root_align(points, root=None):
    points = np.asarray(points, dtype=np.float64)
    r = points[0] if root is None else np.asarray(root)
    return points - r


def mpjpe(gt, pred, root_align=True):
    """Mean per-joint position error in millimeters."""
    gt, pred = np.asarray(gt), np.asarray(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"joint set shapes differ: {gt.shape} vs {pred.shape}")
    if root_align:
        gt, pred = _root_align(gt), _root_align(pred)
    return float(np.linalg.norm(gt - pred, axis=1).mean()) * M_TO_MM


def mpve(gt_vertices, pred_vertices, gt_root=None, pred_root=None, root_align=True):
    """Mean per-vertex Euclidean error in millimeters, same alignment
    protocol as mpjpe (roots default to the first row)."""
    gt_vertices, pred_vertices = np.asarray(gt_vertices), np.asarray(pred_vertices)
    if root_align:
        gt_vertices = _root_align(gt_vertices, gt_root)
        pred_vertices = _root_align(pred_vertices, pred_root)
    return float(np.linalg.norm(gt_vertices - pred_vertices, axis=1).mean()) * M_TO_MM


def similarity_align(source, target):
    """Closed-form similarity Procrustes: returns s, R, t minimizing
    ||s R source + t - target||, with det(R) = +1 enforced."""
    source, target = np.asarray(source, float), np.asarray(target, float)
    mu_s, mu_t = source.mean(axis=0), target.mean(axis=0)
    sc, tc = source - mu_s, target - mu_t
    cov = tc.T @ sc
    u, sing, vt = np.linalg.svd(cov)
    d = np.ones(3)
    d[-1] = np.sign(np.linalg.det(u @ vt))
    if np.linalg.matrix_rank(cov) < 2 or sing[1] < 1e-12:
        log.warning("rank-deficient point set; falling back to translation-only alignment")
        return 1.0, np.eye(3), mu_t - mu_s
    rot = u @ np.diag(d) @ vt
    var_s = (sc ** 2).sum()
    scale = (sing * d).sum() / var_s
    t = mu_t - scale * rot @ mu_s
    return scale, rot, t


def pa_mpjpe(gt, pred):
    """MPJPE after similarity-Procrustes alignment of pred onto gt."""
    gt, pred = np.asarray(gt), np.asarray(pred)
    if gt.shape[0] < 3:
        raise ValueError("need at least 3 points for Procrustes alignment")
    s, rot, t = similarity_align(pred, gt)
    aligned = s * pred @ rot.T + t
    return float(np.linalg.norm(gt - aligned, axis=1).mean()) * M_TO_MM


def pcdr(gt_depths, pred_depths, threshold_m=0.2):
    """Percentage of person pairs whose predicted depth relation (closer /
    farther / equal within the band) matches GT.  None when no pairs."""
    gt_depths = np.asarray(gt_depths, float)
    pred_depths = np.asarray(pred_depths, float)
    if gt_depths.shape != pred_depths.shape:
        raise ValueError("depth lists must be matched one-to-one")
    n = len(gt_depths)
    if n < 2:
        return None

    def relation(a, b):
        d = a - b
        if abs(d) <= threshold_m:
            return 0
        return 1 if d > 0 else -1

    correct = total = 0
    for i in range(n):
        for j in range(i + 1, n):
            total += 1
            if relation(gt_depths[i], gt_depths[j]) == relation(pred_depths[i], pred_depths[j]):
                correct += 1
    return 100.0 * correct / total


def normalized_errors(mve, mpjpe_val, detected, total):
    """AGORA-style recall normalization: error / (detected / total)."""
    if detected == 0:
        return None, None
    if not 0 < detected <= total:
        raise ValueError(f"invalid counts detected={detected} total={total}")
    recall = detected / total
    return mve / recall, mpjpe_val / recall


def write_metrics_csv(path, rows):
    """rows: iterable of (metric_name, value, count); absent metrics are
    written with an empty value field."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value", "count"])
        for name, value, count in rows:
            writer.writerow([name, "" if value is None else f"{value:.6f}", count])


def read_metrics_csv(path):
    out = {}
    with open(path) as f:
        for row in csv.DictReader(f):
            value = None if row["value"] == "" else float(row["value"])
            out[row["metric"]] = (value, int(row["count"]))
    return out
