"""Dense map regression heads and top-N person localization.

Four per-token MLP heads turn decoded tokens into dense maps on the token
grid: joint heatmaps (sigmoid), per-joint 3D offsets, camera depth, and the
143-channel mesh parameter map (6D pose rows 0:132, shape 132:142, age 142).
Localization takes strict 3x3 local maxima of the pelvis heatmap channel and
back-projects each peak's cell (with sub-cell offset refinement) through the
pinhole camera.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import body as body_model
from .autodiff import Tensor, TensorError
from .blocks import LinearWeights
from .camera import CameraIntrinsics
from .encoder import TokenGrid

NUM_JOINTS = body_model.NUM_JOINTS
MS_CHANNELS = 6 * NUM_JOINTS + body_model.NUM_SHAPE + 1  # 143
assert MS_CHANNELS == 143

MIN_DEPTH = 1e-3


@dataclass
class MapSet:
    m2d: Tensor  # K x gh x gw joint heatmaps, in (0, 1)
    mo: Tensor   # 3 x K x gh x gw offsets (x, y sub-cell; z depth rel. root)
    md: Tensor   # 1 x gh x gw camera depth
    ms: Tensor   # 143 x gh x gw mesh parameters

    def __post_init__(self):
        if self.ms.shape[0] != MS_CHANNELS:
            raise TensorError(
                f"mesh parameter map must have {MS_CHANNELS} channels "
                f"(6*{NUM_JOINTS} pose + {body_model.NUM_SHAPE} shape + 1 age), got {self.ms.shape[0]}"
            )

    @property
    def grid(self):
        return self.m2d.shape[1], self.m2d.shape[2]


@dataclass
class Detection:
    grid_pos: tuple[int, int]  # (x, y) cell
    depth: float
    score: float
    params: body_model.BodyParams = None
    translation: np.ndarray = None
    raw_vec: np.ndarray = None


@dataclass
class MlpHead:
    lin1: LinearWeights
    lin2: LinearWeights

    @staticmethod
    def create(dim, hidden, out, rng):
        return MlpHead(LinearWeights.create(dim, hidden, rng), LinearWeights.create(hidden, out, rng))

    def __call__(self, tokens):
        return self.lin2(ad.gelu(self.lin1(tokens)))


@dataclass
class HeadWeights:
    m2d: MlpHead
    mo: MlpHead
    md: MlpHead
    ms: MlpHead

    @staticmethod
    def create(dim, hidden, rng):
        return HeadWeights(
            m2d=MlpHead.create(dim, hidden, NUM_JOINTS, rng),
            mo=MlpHead.create(dim, hidden, 3 * NUM_JOINTS, rng),
            md=MlpHead.create(dim, hidden, 1, rng),
            ms=MlpHead.create(dim, hidden, MS_CHANNELS, rng),
        )


def _to_map(per_token, grid, lead_shape):
    gh, gw = grid
    return per_token.transpose(1, 0).reshape(*lead_shape, gh, gw)


def regress_maps(w: HeadWeights, pose_tokens, shape_tokens, grid):
    """Token-wise heads; each token fills its own grid cell."""
    gh, gw = grid
    if pose_tokens.shape[0] != gh * gw:
        raise TensorError(f"{pose_tokens.shape[0]} tokens cannot tile grid {grid}")
    m2d = _to_map(ad.sigmoid(w.m2d(pose_tokens)), grid, (NUM_JOINTS,))
    mo = _to_map(w.mo(pose_tokens), grid, (3, NUM_JOINTS))
    md = _to_map(w.md(pose_tokens), grid, (1,))
    ms = _to_map(w.ms(shape_tokens), grid, (MS_CHANNELS,))
    return MapSet(m2d=m2d, mo=mo, md=md, ms=ms)


def local_maxima_3x3(heat):
    """Strict 3x3 local maxima of a 2D map -> list of (row, col)."""
    heat = np.asarray(heat)
    gh, gw = heat.shape
    padded = np.full((gh + 2, gw + 2), -np.inf)
    padded[1:-1, 1:-1] = heat
    neighborhoods = [
        padded[1 + dr : 1 + dr + gh, 1 + dc : 1 + dc + gw]
        for dr in (-1, 0, 1)
        for dc in (-1, 0, 1)
        if (dr, dc) != (0, 0)
    ]
    is_peak = np.all([heat > n for n in neighborhoods], axis=0)
    return [tuple(rc) for rc in np.argwhere(is_peak)]


def top_n_centers(maps: MapSet, n_max, score_thresh=0.3):
    """Up to n_max detections from pelvis-channel peaks, score-descending."""
    if n_max < 1:
        raise TensorError("n_max must be >= 1")
    center = maps.m2d.data[0]
    md = maps.md.data[0]
    ms = maps.ms.data
    peaks = []
    for r, c in local_maxima_3x3(center):
        score = float(center[r, c])
        if score >= score_thresh:
            peaks.append((score, r, c))
    peaks.sort(key=lambda p: (-p[0], p[1], p[2]))
    dets = []
    for score, r, c in peaks[:n_max]:
        depth = max(float(md[r, c]), MIN_DEPTH)
        dets.append(
            Detection(grid_pos=(c, r), depth=depth, score=score, raw_vec=ms[:, r, c].copy())
        )
    return dets


def to_camera_translation(det: Detection, cam: CameraIntrinsics, cell_px, offset_xy=(0.0, 0.0)):
    """Pinhole back-projection of the detection's cell center (plus sub-cell
    offset, in cell units) at the predicted depth."""
    if cam.focal <= 0:
        raise TensorError("focal must be positive")
    if det.depth <= 0:
        raise TensorError(f"nonpositive depth {det.depth}")
    x, y = det.grid_pos
    u = (x + 0.5 + offset_xy[0]) * cell_px
    v = (y + 0.5 + offset_xy[1]) * cell_px
    return cam.back_project(u, v, det.depth)


def decode_detection(
    det: Detection,
    template: body_model.BodyTemplate,
    cam: CameraIntrinsics,
    cell_px,
    maps: MapSet = None,
):
    """Split the 143-vector, clamp age to [0, 1], run the body model at the
    back-projected translation.  Returns (mesh V x 3, joints K x 3) arrays
    and fills det.params / det.translation."""
    if det.raw_vec is None or det.raw_vec.shape != (MS_CHANNELS,):
        raise TensorError("detection carries no valid parameter vector")
    offset = (0.0, 0.0)
    if maps is not None:
        x, y = det.grid_pos
        offset = (float(maps.mo.data[0, 0, y, x]), float(maps.mo.data[1, 0, y, x]))
    pelvis = to_camera_translation(det, cam, cell_px, offset)
    det.params = body_model.BodyParams.from_flat(det.raw_vec)
    # the localized point is the posed pelvis (joint 0 of W @ mesh); solve
    # for the translation by posing once at zero translation
    mesh0, joints0 = body_model.forward(template, det.params)
    det.translation = pelvis - joints0.data[0]
    det.params.trans = det.translation
    return mesh0.data + det.translation, joints0.data + det.translation


# -- line-oriented detection records ---------------------------------------
# columns: frame person score x y d p0 .. p142


def write_detections(path, per_frame_detections):
    with open(path, "w") as f:
        f.write("# frame person score x y d p0..p142\n")
        for t, dets in enumerate(per_frame_detections):
            for i, d in enumerate(dets):
                fields = [str(t), str(i), f"{d.score:.17g}", str(d.grid_pos[0]), str(d.grid_pos[1]), f"{d.depth:.17g}"]
                fields += [f"{p:.17g}" for p in d.raw_vec]
                f.write(" ".join(fields) + "\n")


def read_detections(path):
    frames: dict[int, list[Detection]] = {}
    with open(path) as f:
        for line in f:
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split()
            t, person = int(parts[0]), int(parts[1])
            det = Detection(
                grid_pos=(int(parts[3]), int(parts[4])),
                depth=float(parts[5]),
                score=float(parts[2]),
                raw_vec=np.array([float(p) for p in parts[6:]]),
            )
            frames.setdefault(t, []).append(det)
    return [frames.get(t, []) for t in range(max(frames, default=-1) + 1)]
