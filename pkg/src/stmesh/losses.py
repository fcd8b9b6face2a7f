"""Training objective: weighted sum of dense map losses, mesh parameter
losses, a 3D joint loss through the body model, and a pose prior.

Ground-truth maps are rendered on the prediction grid: per-joint Gaussian
heatmaps, sub-cell offsets at joint cells, pelvis depth and the 143-channel
parameter vector at each person's center cell, with validity masks.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import body as body_model
from .autodiff import Tensor
from .camera import CameraIntrinsics
from .heads import MS_CHANNELS, MapSet, NUM_JOINTS

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    w_pose: float = 160.0
    w_mesh: float = 1.0
    w_j: float = 360.0
    w_p: float = 1.6

    def __post_init__(self):
        if min(self.w_pose, self.w_mesh, self.w_j, self.w_p) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class GroundTruthPerson:
    params: body_model.BodyParams
    joints: np.ndarray        # K x 3 camera space
    center_cell: tuple[int, int] = None  # (row, col), filled by render_targets


@dataclass
class GroundTruthMaps:
    m2d: np.ndarray           # K x gh x gw
    mo: np.ndarray            # 3 x K x gh x gw
    md: np.ndarray            # 1 x gh x gw
    ms: np.ndarray            # 143 x gh x gw
    center_mask: np.ndarray   # gh x gw bool
    joint_mask: np.ndarray    # K x gh x gw bool
    persons: list[GroundTruthPerson] = field(default_factory=list)


def render_targets(persons, grid, cam: CameraIntrinsics, cell_px, sigma=1.5):
    """Render GT maps for a frame.  Persons whose pelvis projects outside the
    grid are excluded with a warning."""
    gh, gw = grid
    m2d = np.zeros((NUM_JOINTS, gh, gw))
    mo = np.zeros((3, NUM_JOINTS, gh, gw))
    md = np.zeros((1, gh, gw))
    ms = np.zeros((MS_CHANNELS, gh, gw))
    center_mask = np.zeros((gh, gw), dtype=bool)
    joint_mask = np.zeros((NUM_JOINTS, gh, gw), dtype=bool)
    kept = []
    rr, cc = np.mgrid[0:gh, 0:gw]

    for person in persons:
        uv, depth = cam.project(person.joints)
        cells = uv / cell_px - 0.5  # continuous cell coordinates (col, row)
        root_col, root_row = cells[0]
        r0, c0 = int(round(root_row)), int(round(root_col))
        if not (0 <= r0 < gh and 0 <= c0 < gw):
            log.warning("person pelvis projects outside the %dx%d grid; skipped", gh, gw)
            continue
        person.center_cell = (r0, c0)
        kept.append(person)

        for j in range(NUM_JOINTS):
            jc, jr = cells[j]
            g = np.exp(-((rr - jr) ** 2 + (cc - jc) ** 2) / (2.0 * sigma ** 2))
            np.maximum(m2d[j], g, out=m2d[j])
            rj, cj = int(round(jr)), int(round(jc))
            if 0 <= rj < gh and 0 <= cj < gw:
                mo[0, j, rj, cj] = jc - cj
                mo[1, j, rj, cj] = jr - rj
                mo[2, j, rj, cj] = depth[j] - depth[0]
                joint_mask[j, rj, cj] = True
        md[0, r0, c0] = depth[0]
        ms[:, r0, c0] = person.params.flatten()
        center_mask[r0, c0] = True

    return GroundTruthMaps(
        m2d=m2d, mo=mo, md=md, ms=ms,
        center_mask=center_mask, joint_mask=joint_mask, persons=kept,
    )


# -- pose prior ------------------------------------------------------------


@dataclass
class GaussianMixturePrior:
    """Negative log density over the flattened 132-dim 6D pose.

    Flat text format (one value per whitespace-separated token):
        M dim
        then per component: weight, dim means, dim variance diagonals.
    """

    weights: np.ndarray   # M
    means: np.ndarray     # M x dim
    variances: np.ndarray # M x dim

    @staticmethod
    def identity_default():
        mean = body_model.identity_rot6d().reshape(1, -1)
        return GaussianMixturePrior(
            weights=np.ones(1), means=mean, variances=np.ones_like(mean)
        )

    @property
    def dim(self):
        return self.means.shape[1]

    def save(self, path):
        with open(path, "w") as f:
            m, d = self.means.shape
            f.write(f"{m} {d}\n")
            for i in range(m):
                vals = [self.weights[i], *self.means[i], *self.variances[i]]
                f.write(" ".join(f"{v:.17g}" for v in vals) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            tokens = f.read().split()
        m, d = int(tokens[0]), int(tokens[1])
        rest = np.array([float(t) for t in tokens[2:]]).reshape(m, 1 + 2 * d)
        return cls(weights=rest[:, 0], means=rest[:, 1 : 1 + d], variances=rest[:, 1 + d :])

    def nll(self, theta):
        """theta: 22 x 6 (Tensor or array) -> scalar Tensor."""
        if not isinstance(theta, Tensor):
            theta = ad.tensor(np.asarray(theta, dtype=np.float64))
        flat = theta.reshape(1, self.dim)
        comps = []
        log_norm = -0.5 * (self.dim * math.log(2 * math.pi) + np.log(self.variances).sum(axis=1))
        for i in range(len(self.weights)):
            diff = flat - self.means[i : i + 1]
            quad = (diff * diff * (1.0 / self.variances[i : i + 1])).sum()
            comps.append(math.log(self.weights[i]) + log_norm[i] + (-0.5) * quad)
        if len(comps) == 1:
            return -comps[0]
        return -ad.logsumexp(ad.stack([c.reshape(1) for c in comps], axis=0).reshape(1, -1), axis=-1).reshape(())


def pose_prior(theta, prior: GaussianMixturePrior = None):
    prior = prior or GaussianMixturePrior.identity_default()
    return prior.nll(theta)


# -- loss terms ------------------------------------------------------------


def _mse(pred, target):
    d = pred - ad.tensor(target)
    return (d * d).mean()


def _masked_mse(pred, target, mask):
    """MSE over masked elements only; exactly zero (value and grad) when the
    mask is empty."""
    count = int(mask.sum())
    if count == 0:
        return ad.tensor(0.0)
    m = mask.astype(np.float64)
    d = (pred - ad.tensor(target)) * ad.tensor(m)
    return (d * d).sum() * (1.0 / float(m.sum()))


def _pelvis_position(maps: MapSet, cell, cam, cell_px):
    """Differentiable back-projection of the predicted pelvis at a GT cell."""
    r, c = cell
    off_x = maps.mo[0, 0, r, c]
    off_y = maps.mo[1, 0, r, c]
    depth = maps.md[0, r, c]
    u = (off_x + (c + 0.5)) * cell_px
    v = (off_y + (r + 0.5)) * cell_px
    x = (u - cam.cx) * depth * (1.0 / cam.focal)
    y = (v - cam.cy) * depth * (1.0 / cam.focal)
    return ad.concat([x.reshape(1, 1), y.reshape(1, 1), depth.reshape(1, 1)], axis=1)


def total_loss(
    pred: MapSet,
    gt: GroundTruthMaps,
    weights: LossWeights,
    template: body_model.BodyTemplate,
    cam: CameraIntrinsics,
    cell_px,
    prior: GaussianMixturePrior = None,
    full_map_2d=True,
    joint_loss_3d=True,
):
    """Weighted objective; returns (scalar Tensor, dict of term values)."""
    prior = prior or GaussianMixturePrior.identity_default()

    if full_map_2d:
        l_2d = _mse(pred.m2d, gt.m2d)
    else:
        l_2d = _masked_mse(pred.m2d, gt.m2d, np.broadcast_to(gt.joint_mask, gt.m2d.shape))
    l_o = _masked_mse(pred.mo, gt.mo, np.broadcast_to(gt.joint_mask[None], gt.mo.shape))
    l_d = _masked_mse(pred.md, gt.md, gt.center_mask[None])

    n = len(gt.persons)
    zero = ad.tensor(0.0)
    l_theta, l_beta, l_alpha, l_j, l_p = zero, zero, zero, zero, zero
    for person in gt.persons:
        r, c = person.center_cell
        vec = pred.ms[:, r, c]
        theta = vec[0:132].reshape(NUM_JOINTS, 6)
        gt_vec = person.params.flatten()
        l_theta = l_theta + _mse(theta, gt_vec[:132].reshape(NUM_JOINTS, 6))
        l_beta = l_beta + _mse(vec[132:142], gt_vec[132:142])
        l_alpha = l_alpha + _mse(vec[142:143], gt_vec[142:143])
        l_p = l_p + prior.nll(theta)

        pelvis = _pelvis_position(pred, (r, c), cam, cell_px)
        _, joints0 = body_model.forward_flat(template, vec, np.zeros(3))
        # shift so the posed pelvis lands on the back-projected prediction
        joints = joints0 - joints0[0:1] + pelvis
        if joint_loss_3d:
            l_j = l_j + _mse(joints, person.joints)
        else:
            uv_gt, _ = cam.project(person.joints)
            z = joints[:, 2:3]
            u = joints[:, 0:1] * (cam.focal / 1.0) / z + cam.cx
            v = joints[:, 1:2] * (cam.focal / 1.0) / z + cam.cy
            l_j = l_j + _mse(ad.concat([u, v], axis=1), uv_gt)
    if n > 0:
        inv = 1.0 / n
        l_theta, l_beta, l_alpha = l_theta * inv, l_beta * inv, l_alpha * inv
        l_j, l_p = l_j * inv, l_p * inv

    total = (
        weights.w_pose * (l_2d + l_o + l_d)
        + weights.w_mesh * (l_theta + l_beta + l_alpha)
        + weights.w_j * l_j
        + weights.w_p * l_p
    )
    terms = {
        "l_2d": float(l_2d.data), "l_o": float(l_o.data), "l_d": float(l_d.data),
        "l_theta": float(l_theta.data), "l_beta": float(l_beta.data),
        "l_alpha": float(l_alpha.data), "l_j": float(l_j.data), "l_p": float(l_p.data),
        "total": float(total.data),
    }
    return total, terms
