"""Closed-loop synthetic data: multi-person clips with exact ground truth.

Each person gets random shape, age, and near-identity joint rotations; a
clip interpolates smoothly between two keyframes.  Rasters are vertex splats
(silhouette, inverse depth with nearer-wins compositing, person index), not
renders; they only need to be informative for the conv backbone.

Randomness comes from numpy's PCG64 generator seeded directly, which is a
fixed, documented algorithm: the same seed reproduces the same clip on any
platform.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import body as body_model
from .camera import CameraIntrinsics

RASTER_CHANNELS = 3


class SceneError(Exception):
    pass


@dataclass
class ScenePerson:
    params: body_model.BodyParams
    mesh: np.ndarray    # V x 3
    joints: np.ndarray  # K x 3


@dataclass
class SceneClip:
    frames: list[list[ScenePerson]]  # T frames of N persons
    camera: CameraIntrinsics
    rasters: np.ndarray              # T x C x H x W
    seed: int
    image_hw: tuple[int, int]

    @property
    def num_frames(self):
        return len(self.frames)

    @property
    def num_persons(self):
        return len(self.frames[0])


def _rot6d_near_identity(rng, max_angle):
    """Per-joint random rotations with axis-angle magnitude <= max_angle."""
    import scipy.spatial.transform as st

    axes = rng.normal(size=(body_model.NUM_JOINTS, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    angles = rng.uniform(0.0, max_angle, size=(body_model.NUM_JOINTS, 1))
    mats = st.Rotation.from_rotvec(axes * angles).as_matrix()
    return body_model.matrix_to_rot6d(mats)


def _smoothstep(t):
    return t * t * (3.0 - 2.0 * t)


def _pose_frame(template, theta, beta, alpha, trans):
    params = body_model.BodyParams(theta=theta, beta=beta, alpha=alpha, trans=trans)
    mesh, joints = body_model.forward(template, params)
    return ScenePerson(params=params, mesh=mesh.data, joints=joints.data)


def sample_clip(
    template: body_model.BodyTemplate,
    seed,
    num_frames=4,
    n_persons=2,
    motion_amplitude=1.0,
    image_hw=(64, 64),
    camera: CameraIntrinsics = None,
    margin_px=2.0,
    max_tries=100,
):
    """Deterministic clip for a seed; every person's joints project inside
    the frame in every frame (resampled up to ``max_tries`` times)."""
    if num_frames < 1:
        raise SceneError("need at least one frame")
    h, w = image_hw
    cam = camera or CameraIntrinsics.default_for_image(h, w)
    rng = np.random.default_rng(np.random.PCG64(seed))

    people_keyframes = []
    for _ in range(n_persons):
        for attempt in range(max_tries + 1):
            if attempt == max_tries:
                raise SceneError(f"no in-frustum placement found after {max_tries} tries")
            beta = rng.uniform(-2.0, 2.0, size=body_model.NUM_SHAPE)
            alpha = 0.0 if rng.uniform() < 0.8 else float(rng.uniform())
            depth = rng.uniform(2.0, 6.0)
            # pelvis pixel near the frame center, back-projected to x/y
            u = rng.uniform(0.3 * w, 0.7 * w)
            v = rng.uniform(0.35 * h, 0.65 * h)
            pelvis = cam.back_project(u, v, depth)

            theta_a = _rot6d_near_identity(rng, np.deg2rad(30.0))
            delta = _rot6d_near_identity(rng, np.deg2rad(30.0) * min(motion_amplitude, 1.0))
            theta_b = theta_a + motion_amplitude * (delta - body_model.identity_rot6d())
            trans_delta = motion_amplitude * rng.uniform(-0.3, 0.3, size=3)

            # translation such that the posed pelvis sits at the sampled point
            probe = _pose_frame(
                template, theta_a, beta, alpha, np.zeros(3)
            )
            trans_a = pelvis - probe.joints[0]
            trans_b = trans_a + trans_delta

            ok = True
            for frac in (0.0, 0.5, 1.0):
                s = _smoothstep(frac)
                theta = theta_a + s * (theta_b - theta_a)
                trans = trans_a + s * (trans_b - trans_a)
                person = _pose_frame(template, theta, beta, alpha, trans)
                uv, z = cam.project(person.joints)
                if np.any(z <= 0.5) or np.any(uv < margin_px) or np.any(
                    uv[:, 0] > w - margin_px
                ) or np.any(uv[:, 1] > h - margin_px):
                    ok = False
                    break
            if ok:
                people_keyframes.append((theta_a, theta_b, beta, alpha, trans_a, trans_b))
                break

    frames = []
    for t in range(num_frames):
        frac = 0.0 if num_frames == 1 else t / (num_frames - 1)
        s = _smoothstep(frac)
        persons = []
        for theta_a, theta_b, beta, alpha, trans_a, trans_b in people_keyframes:
            theta = theta_a + s * (theta_b - theta_a)
            trans = trans_a + s * (trans_b - trans_a)
            persons.append(_pose_frame(template, theta, beta, alpha, trans))
        frames.append(persons)

    rasters = np.stack([render_raster(persons, cam, image_hw) for persons in frames])
    return SceneClip(frames=frames, camera=cam, rasters=rasters, seed=int(seed), image_hw=image_hw)


def render_raster(persons, cam: CameraIntrinsics, image_hw):
    """C x H x W vertex-splat raster: silhouette, inverse depth
    (nearer-wins), person-index modulation."""
    h, w = image_hw
    out = np.zeros((RASTER_CHANNELS, h, w))
    n = max(len(persons), 1)
    for i, person in enumerate(persons):
        uv, z = cam.project(person.mesh)
        valid = (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
        cols = uv[valid, 0].astype(int)
        rows = uv[valid, 1].astype(int)
        out[0, rows, cols] = 1.0
        # per-pixel max over this person's vertices, then nearer-wins
        # compositing against what earlier persons wrote
        own = np.zeros((h, w))
        np.maximum.at(own, (rows, cols), 1.0 / z[valid])
        nearer = own > out[1]
        out[1][nearer] = own[nearer]
        out[2][nearer] = (i + 1) / n
    return out


# -- directory serialization ----------------------------------------------
# <dir>/manifest.json            counts, geometry, intrinsics, seed
# <dir>/frame_%03d_gt.txt        one line per person:
#                                143 params | 3 trans | K*3 joints
# <dir>/frame_%03d_raster.f64    raw row-major float64 C x H x W


def save_clip(clip: SceneClip, directory):
    os.makedirs(directory, exist_ok=True)
    h, w = clip.image_hw
    manifest = {
        "num_frames": clip.num_frames,
        "n_persons": clip.num_persons,
        "seed": clip.seed,
        "height": h,
        "width": w,
        "channels": RASTER_CHANNELS,
        "focal": clip.camera.focal,
        "cx": clip.camera.cx,
        "cy": clip.camera.cy,
    }
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    for t, persons in enumerate(clip.frames):
        with open(os.path.join(directory, f"frame_{t:03d}_gt.txt"), "w") as f:
            for p in persons:
                vals = np.concatenate([p.params.flatten(), p.params.trans, p.joints.reshape(-1)])
                f.write(" ".join(f"{v:.17g}" for v in vals) + "\n")
        clip.rasters[t].astype(np.float64).tofile(
            os.path.join(directory, f"frame_{t:03d}_raster.f64")
        )


def load_clip(directory, template: body_model.BodyTemplate):
    with open(os.path.join(directory, "manifest.json")) as f:
        manifest = json.load(f)
    cam = CameraIntrinsics(manifest["focal"], manifest["cx"], manifest["cy"])
    h, w, c = manifest["height"], manifest["width"], manifest["channels"]
    frames, rasters = [], []
    for t in range(manifest["num_frames"]):
        persons = []
        with open(os.path.join(directory, f"frame_{t:03d}_gt.txt")) as f:
            for line in f:
                vals = np.array([float(x) for x in line.split()])
                params = body_model.BodyParams.from_flat(vals[:143], trans=vals[143:146])
                joints = vals[146:].reshape(-1, 3)
                mesh, _ = body_model.forward(template, params)
                persons.append(ScenePerson(params=params, mesh=mesh.data, joints=joints))
        frames.append(persons)
        raster = np.fromfile(os.path.join(directory, f"frame_{t:03d}_raster.f64")).reshape(c, h, w)
        rasters.append(raster)
    return SceneClip(
        frames=frames,
        camera=cam,
        rasters=np.stack(rasters),
        seed=manifest["seed"],
        image_hw=(h, w),
    )
