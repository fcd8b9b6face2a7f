"""Parametric body model: 6D-rotation pose, 10-dim shape basis, age blend,
forward kinematics and linear blend skinning, with joints regressed linearly
from the mesh (J = W @ mesh).

The default template is a procedurally built capsule-limb humanoid with 22
joints in the conventional SMPL ordering (pelvis root, hips, spine chain,
feet, collars, head, arms); each joint carries a 6-vertex ring whose mean is
exactly the joint position, which makes the joint regressor reproduce the
skeleton by construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, TensorError

NUM_JOINTS = 22
NUM_SHAPE = 10

# parent index per joint, -1 for the pelvis root (SMPL body ordering)
KIN_TREE = np.array(
    [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19],
    dtype=np.int64,
)

JOINT_NAMES = [
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2",
    "l_ankle", "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar",
    "r_collar", "head", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
    "l_wrist", "r_wrist",
]

# T-pose joint positions in meters (y up, x left, z forward)
_REST_JOINTS = np.array([
    [0.00, 0.95, 0.00],   # pelvis
    [0.09, 0.91, 0.00],   # l_hip
    [-0.09, 0.91, 0.00],  # r_hip
    [0.00, 1.04, 0.00],   # spine1
    [0.10, 0.49, 0.00],   # l_knee
    [-0.10, 0.49, 0.00],  # r_knee
    [0.00, 1.14, 0.00],   # spine2
    [0.11, 0.08, 0.00],   # l_ankle
    [-0.11, 0.08, 0.00],  # r_ankle
    [0.00, 1.22, 0.00],   # spine3
    [0.12, 0.02, 0.10],   # l_foot
    [-0.12, 0.02, 0.10],  # r_foot
    [0.00, 1.43, 0.00],   # neck
    [0.07, 1.40, 0.00],   # l_collar
    [-0.07, 1.40, 0.00],  # r_collar
    [0.00, 1.55, 0.00],   # head
    [0.18, 1.40, 0.00],   # l_shoulder
    [-0.18, 1.40, 0.00],  # r_shoulder
    [0.45, 1.40, 0.00],   # l_elbow
    [-0.45, 1.40, 0.00],  # r_elbow
    [0.70, 1.40, 0.00],   # l_wrist
    [-0.70, 1.40, 0.00],  # r_wrist
])

_RING_SIZE = 6
_RING_RADIUS = 0.03


class BodyModelError(Exception):
    pass


@dataclass
class BodyTemplate:
    vertices: np.ndarray          # V x 3 rest mesh, meters
    shape_dirs: np.ndarray        # V x 3 x 10 displacement basis
    infant_vertices: np.ndarray   # V x 3 second template for age blending
    kin_tree: np.ndarray          # parent index per joint, root = -1
    joint_regressor: np.ndarray   # K x V, nonnegative, rows sum to 1
    skin_weights: np.ndarray      # V x 22, rows sum to 1

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_joints(self):
        return self.joint_regressor.shape[0]

    def validate(self):
        w = self.joint_regressor
        if np.any(w < 0) or not np.allclose(w.sum(axis=1), 1.0, atol=1e-9):
            raise BodyModelError("joint regressor rows must be nonnegative and sum to 1")
        if not np.allclose(self.skin_weights.sum(axis=1), 1.0, atol=1e-9):
            raise BodyModelError("skin weight rows must sum to 1")
        roots = np.flatnonzero(self.kin_tree < 0)
        if roots.tolist() != [0]:
            raise BodyModelError("kinematic tree must have exactly joint 0 as root")
        # every joint must reach the root without cycles
        for j in range(len(self.kin_tree)):
            seen, p = set(), j
            while p != 0:
                if p in seen:
                    raise BodyModelError("cycle in kinematic tree")
                seen.add(p)
                p = int(self.kin_tree[p])

    # -- flat binary serialization ----------------------------------------
    # header: magic 'STBT', version u32, V u32, K u32; then row-major f64
    # arrays in declaration order (vertices, shape_dirs, infant_vertices,
    # kin_tree as i64, joint_regressor, skin_weights).

    MAGIC = b"STBT"
    VERSION = 1

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.MAGIC)
            f.write(struct.pack("<III", self.VERSION, self.num_vertices, self.num_joints))
            for arr in (self.vertices, self.shape_dirs, self.infant_vertices):
                f.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
            f.write(np.ascontiguousarray(self.kin_tree, dtype=np.int64).tobytes())
            for arr in (self.joint_regressor, self.skin_weights):
                f.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            if f.read(4) != cls.MAGIC:
                raise BodyModelError(f"{path}: bad magic")
            version, v, k = struct.unpack("<III", f.read(12))
            if version != cls.VERSION:
                raise BodyModelError(f"{path}: unsupported version {version}")

            def arr(shape, dtype=np.float64):
                n = int(np.prod(shape))
                return np.frombuffer(f.read(n * 8), dtype=dtype).reshape(shape).copy()

            t = cls(
                vertices=arr((v, 3)),
                shape_dirs=arr((v, 3, NUM_SHAPE)),
                infant_vertices=arr((v, 3)),
                kin_tree=arr((NUM_JOINTS,), np.int64),
                joint_regressor=arr((k, v)),
                skin_weights=arr((v, NUM_JOINTS)),
            )
        t.validate()
        return t


@dataclass
class BodyParams:
    theta: np.ndarray  # 22 x 6 joint rotations (6D)
    beta: np.ndarray   # 10 shape coefficients
    alpha: float       # age blend in [0, 1]
    trans: np.ndarray  # 3-vector camera-space translation, meters

    @staticmethod
    def rest():
        return BodyParams(identity_rot6d(), np.zeros(NUM_SHAPE), 0.0, np.zeros(3))

    def flatten(self):
        """143-vector layout: theta rows (132) | beta (10) | alpha (1)."""
        return np.concatenate([self.theta.reshape(-1), self.beta, [self.alpha]])

    @staticmethod
    def from_flat(vec, trans=None, clamp_alpha=True):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (143,):
            raise BodyModelError(f"expected a 143-vector, got {vec.shape}")
        alpha = float(vec[142])
        if clamp_alpha:
            alpha = min(max(alpha, 0.0), 1.0)
        return BodyParams(
            theta=vec[:132].reshape(NUM_JOINTS, 6),
            beta=vec[132:142].copy(),
            alpha=alpha,
            trans=np.zeros(3) if trans is None else np.asarray(trans, dtype=np.float64),
        )


def identity_rot6d():
    r = np.zeros((NUM_JOINTS, 6))
    r[:, 0] = 1.0
    r[:, 4] = 1.0
    return r


def matrix_to_rot6d(r):
    """First two columns of the rotation matrix, stacked."""
    r = np.asarray(r)
    return np.concatenate([r[..., :, 0], r[..., :, 1]], axis=-1)


def _norm_rows(x, what):
    n2 = (x * x).sum(axis=-1, keepdims=True)
    if np.any(n2.data < 1e-20):
        raise BodyModelError(f"degenerate 6D rotation input: {what} has (near-)zero norm")
    return x * (1.0 / ad.sqrt(n2))


def rot6d_to_matrix(r):
    """Gram-Schmidt the two 3-vectors; third column by cross product.

    Accepts a single 6-vector or a J x 6 batch; returns 3x3 or J x 3 x 3.
    Differentiable.
    """
    single = False
    if not isinstance(r, Tensor):
        r = ad.tensor(r)
    if len(r.shape) == 1:
        r = r.reshape(1, 6)
        single = True
    a1 = r[:, 0:3]
    a2 = r[:, 3:6]
    b1 = _norm_rows(a1, "first 3-vector")
    dot = (b1 * a2).sum(axis=-1, keepdims=True)
    u2 = a2 - dot * b1
    b2 = _norm_rows(u2, "Gram-Schmidt residual")
    b3 = _cross_rows(b1, b2)
    mat = ad.stack([b1, b2, b3], axis=2)  # columns are b1 | b2 | b3
    return mat[0] if single else mat


def _cross_rows(a, b):
    ax, ay, az = a[:, 0:1], a[:, 1:2], a[:, 2:3]
    bx, by, bz = b[:, 0:1], b[:, 1:2], b[:, 2:3]
    return ad.concat([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=1)


def _as_t(x):
    return x if isinstance(x, Tensor) else ad.tensor(np.asarray(x, dtype=np.float64))


def forward(template: BodyTemplate, params: BodyParams):
    """Pose the template: age blend, shape displacement, forward kinematics,
    linear blend skinning, translation.  Returns (mesh V x 3, joints K x 3)
    as Tensors; differentiable w.r.t. theta/beta/alpha/trans when those are
    passed as Tensors."""
    theta = _as_t(params.theta)
    beta = _as_t(params.beta).reshape(NUM_SHAPE, 1)
    alpha = _as_t(params.alpha).reshape(1, 1)
    trans = _as_t(params.trans).reshape(1, 3)
    v = template.num_vertices

    adult = ad.tensor(template.vertices)
    infant = ad.tensor(template.infant_vertices)
    blended = adult + alpha * (infant - adult)
    disp = ad.matmul(ad.tensor(template.shape_dirs.reshape(v * 3, NUM_SHAPE)), beta)
    shaped = blended + disp.reshape(v, 3)

    w_reg = ad.tensor(template.joint_regressor)
    rest_joints = ad.matmul(w_reg, shaped)  # K x 3

    rots = rot6d_to_matrix(theta)  # 22 x 3 x 3
    glob_rot: list[Tensor] = [None] * NUM_JOINTS
    glob_pos: list[Tensor] = [None] * NUM_JOINTS
    for j in range(NUM_JOINTS):
        p = int(template.kin_tree[j])
        rj = rots[j]
        if p < 0:
            glob_rot[j] = rj
            glob_pos[j] = rest_joints[j : j + 1]
        else:
            glob_rot[j] = ad.matmul(glob_rot[p], rj)
            bone = rest_joints[j : j + 1] - rest_joints[p : p + 1]
            glob_pos[j] = glob_pos[p] + ad.matmul(bone, glob_rot[p].transpose(1, 0))

    skin = template.skin_weights
    mesh = None
    for j in range(NUM_JOINTS):
        col = skin[:, j : j + 1]
        if not col.any():
            continue
        local = shaped - rest_joints[j : j + 1]
        moved = ad.matmul(local, glob_rot[j].transpose(1, 0)) + glob_pos[j]
        term = ad.tensor(col) * moved
        mesh = term if mesh is None else mesh + term
    mesh = mesh + trans
    joints = ad.matmul(w_reg, mesh)
    return mesh, joints


def forward_flat(template: BodyTemplate, vec, trans):
    """``forward`` from a 143-vector (theta | beta | alpha) Tensor plus a
    translation Tensor; keeps gradients flowing from map predictions."""
    vec = _as_t(vec).reshape(143)
    params = BodyParams(
        theta=vec[0:132].reshape(NUM_JOINTS, 6),
        beta=vec[132:142],
        alpha=vec[142:143],
        trans=trans,
    )
    return forward(template, params)


def _ring_offsets():
    # three offsets and their negatives: sums to zero exactly
    angles = [0.0, 2 * np.pi / 6, 4 * np.pi / 6]
    half = np.array([[np.cos(a) * _RING_RADIUS, 0.0, np.sin(a) * _RING_RADIUS] for a in angles])
    return np.concatenate([half, -half], axis=0)


def _point_segment_distance(points, a, b):
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-12:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=1)


def build_default_template(num_vertices=602, seed=0):
    """Deterministic capsule-limb humanoid template.

    22-joint T-pose skeleton; each joint carries a 6-vertex ring centered at
    the joint (so the uniform joint regressor reproduces the skeleton
    exactly); remaining vertices are sampled on bone capsules.  Skinning is a
    nearest-two-joints soft assignment.  Shape basis: component 0 scales
    height, component 1 limb girth, the rest are small orthogonalized random
    displacements.  The infant template is the adult scaled to 0.4 with the
    head region enlarged.
    """
    v = int(num_vertices)
    if v < 100:
        raise BodyModelError(f"need at least 100 vertices, got {v}")
    rng = np.random.default_rng(seed)
    k = NUM_JOINTS
    n_ring = k * _RING_SIZE
    if v < n_ring:
        raise BodyModelError("vertex budget smaller than the joint rings")

    verts = np.zeros((v, 3))
    offsets = _ring_offsets()
    for j in range(k):
        verts[j * _RING_SIZE : (j + 1) * _RING_SIZE] = _REST_JOINTS[j] + offsets

    bones = [(j, int(KIN_TREE[j])) for j in range(1, k)]
    for i in range(n_ring, v):
        j, p = bones[rng.integers(len(bones))]
        t = rng.uniform()
        axis_pt = _REST_JOINTS[p] + t * (_REST_JOINTS[j] - _REST_JOINTS[p])
        radius = rng.uniform(0.02, 0.07)
        phi = rng.uniform(0, 2 * np.pi)
        # capsule cross-section in a plane roughly perpendicular to the bone
        d = _REST_JOINTS[j] - _REST_JOINTS[p]
        d = d / (np.linalg.norm(d) + 1e-12)
        ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        u1 = np.cross(d, ref)
        u1 /= np.linalg.norm(u1)
        u2 = np.cross(d, u1)
        verts[i] = axis_pt + radius * (np.cos(phi) * u1 + np.sin(phi) * u2)

    # joint regressor: uniform over each joint's ring
    w_reg = np.zeros((k, v))
    for j in range(k):
        w_reg[j, j * _RING_SIZE : (j + 1) * _RING_SIZE] = 1.0 / _RING_SIZE

    # nearest-two-joints soft skinning (distance to the joint's bone segment)
    dists = np.zeros((v, k))
    for j in range(k):
        p = int(KIN_TREE[j])
        a = _REST_JOINTS[p] if p >= 0 else _REST_JOINTS[j]
        dists[:, j] = _point_segment_distance(verts, a, _REST_JOINTS[j])
    skin = np.zeros((v, k))
    nearest2 = np.argsort(dists, axis=1)[:, :2]
    for i in range(v):
        j1, j2 = nearest2[i]
        w1 = 1.0 / (dists[i, j1] + 1e-3)
        w2 = 1.0 / (dists[i, j2] + 1e-3)
        skin[i, j1] = w1 / (w1 + w2)
        skin[i, j2] = w2 / (w1 + w2)

    # shape basis
    shape_dirs = np.zeros((v, 3, NUM_SHAPE))
    root = _REST_JOINTS[0]
    shape_dirs[:, 1, 0] = 0.1 * (verts[:, 1] - root[1])  # height
    radial = verts - _REST_JOINTS[np.argmin(dists, axis=1)]
    rn = np.linalg.norm(radial, axis=1, keepdims=True)
    shape_dirs[:, :, 1] = 0.02 * radial / np.maximum(rn, 1e-6)  # girth
    rand = rng.normal(size=(v * 3, 8))
    q, _ = np.linalg.qr(rand)
    shape_dirs[:, :, 2:] = 0.05 * q.reshape(v, 3, 8)

    # infant: 0.4 scale with enlarged head region
    infant = root + 0.4 * (verts - root)
    head_region = np.isin(np.argmin(dists, axis=1), [12, 15])
    head_center = root + 0.4 * (_REST_JOINTS[15] - root)
    infant[head_region] = head_center + 1.8 * (infant[head_region] - head_center)

    template = BodyTemplate(
        vertices=verts,
        shape_dirs=shape_dirs,
        infant_vertices=infant,
        kin_tree=KIN_TREE.copy(),
        joint_regressor=w_reg,
        skin_weights=skin,
    )
    template.validate()
    return template


def template_height(template: BodyTemplate):
    return float(template.vertices[:, 1].max() - template.vertices[:, 1].min())
