"""Body model: rest-pose identities, kinematic-chain oracles, rotation
encoding, age blending, and serialization."""

import os

import numpy as np
import pytest
import scipy.spatial.transform as st_rot
from hypothesis import given, settings
from hypothesis import strategies as st

import stmesh.autodiff as ad
from stmesh import body
from stmesh.body import (
    BodyModelError,
    BodyParams,
    KIN_TREE,
    NUM_JOINTS,
    NUM_SHAPE,
    forward,
    identity_rot6d,
    matrix_to_rot6d,
    rot6d_to_matrix,
)


def rest_params(**overrides):
    base = dict(theta=identity_rot6d(), beta=np.zeros(NUM_SHAPE), alpha=0.0,
                trans=np.zeros(3))
    base.update(overrides)
    return BodyParams(**base)


class TestRotation6d:
    def test_identity_round_trip(self):
        r6 = identity_rot6d()
        mats = rot6d_to_matrix(ad.tensor(r6)).data
        ad.reset_tape()
        np.testing.assert_allclose(mats, np.tile(np.eye(3), (NUM_JOINTS, 1, 1)), atol=1e-15)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_random_rotation_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        mats = st_rot.Rotation.random(NUM_JOINTS, random_state=rng).as_matrix()
        back = rot6d_to_matrix(ad.tensor(matrix_to_rot6d(mats))).data
        ad.reset_tape()
        np.testing.assert_allclose(back, mats, atol=1e-12)

    def test_output_is_orthonormal_for_noisy_input(self, rng):
        r6 = identity_rot6d() + 0.5 * rng.normal(size=(NUM_JOINTS, 6))
        mats = rot6d_to_matrix(ad.tensor(r6)).data
        ad.reset_tape()
        eye = np.einsum("kij,kil->kjl", mats, mats)
        np.testing.assert_allclose(eye, np.tile(np.eye(3), (NUM_JOINTS, 1, 1)), atol=1e-12)
        np.testing.assert_allclose(np.linalg.det(mats), 1.0, atol=1e-12)

    def test_degenerate_input_raises(self):
        bad = identity_rot6d()
        bad[3] = 0.0
        with pytest.raises(BodyModelError):
            rot6d_to_matrix(ad.tensor(bad))
        ad.reset_tape()


class TestKinematics:
    def test_kin_tree_is_a_rooted_tree(self):
        assert KIN_TREE[0] == -1
        assert all(0 <= KIN_TREE[j] < j for j in range(1, NUM_JOINTS))

    def test_rest_pose_reproduces_template(self, small_template):
        mesh, joints = forward(small_template, rest_params())
        ad.reset_tape()
        np.testing.assert_allclose(mesh.data, small_template.vertices, atol=1e-13)
        np.testing.assert_allclose(
            joints.data, small_template.joint_regressor @ small_template.vertices, atol=1e-13
        )

    def test_translation_is_additive(self, small_template, rng):
        t = rng.normal(size=3)
        mesh0, joints0 = forward(small_template, rest_params())
        mesh1, joints1 = forward(small_template, rest_params(trans=t))
        ad.reset_tape()
        np.testing.assert_allclose(mesh1.data, mesh0.data + t, atol=1e-13)
        np.testing.assert_allclose(joints1.data, joints0.data + t, atol=1e-13)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_root_rotation_is_rigid(self, seed):
        # rotating only the root equals rotating the rest mesh about the
        # rest root position: R (v - j0) + j0
        template = TestKinematics._template()
        rng = np.random.default_rng(seed)
        rot = st_rot.Rotation.random(random_state=rng).as_matrix()
        theta = identity_rot6d()
        theta[0] = matrix_to_rot6d(rot[None])[0]
        mesh, joints = forward(template, rest_params(theta=theta))
        rest_mesh, rest_joints = forward(template, rest_params())
        ad.reset_tape()
        j0 = rest_joints.data[0]
        oracle = (rest_mesh.data - j0) @ rot.T + j0
        np.testing.assert_allclose(mesh.data, oracle, atol=1e-12)

    @staticmethod
    def _template():
        if not hasattr(TestKinematics, "_cached"):
            TestKinematics._cached = body.build_default_template(num_vertices=140, seed=0)
        return TestKinematics._cached

    def test_child_joint_moves_with_parent_rotation(self, small_template):
        theta = identity_rot6d()
        rot = st_rot.Rotation.from_rotvec([0, 0, np.pi / 4]).as_matrix()
        theta[1] = matrix_to_rot6d(rot[None])[0]  # left hip
        _, joints = forward(small_template, rest_params(theta=theta))
        _, rest_joints = forward(small_template, rest_params())
        ad.reset_tape()
        knee, hip = 4, 1  # knee is the child of the rotated hip
        oracle = rot @ (rest_joints.data[knee] - rest_joints.data[hip]) + rest_joints.data[hip]
        np.testing.assert_allclose(joints.data[knee], oracle, atol=1e-12)
        # the regressed pelvis may shift slightly: vertices near the hip are
        # blend-skinned, and the joint regressor reads the deformed mesh
        assert np.abs(joints.data[0] - rest_joints.data[0]).max() < 0.05


class TestShapeAndAge:
    def test_shape_dir_zero_scales_height(self, small_template):
        tall, _ = forward(small_template, rest_params(beta=np.eye(NUM_SHAPE)[0] * 2.0))
        rest, _ = forward(small_template, rest_params())
        ad.reset_tape()
        h_tall = tall.data[:, 1].max() - tall.data[:, 1].min()
        h_rest = rest.data[:, 1].max() - rest.data[:, 1].min()
        assert h_tall > h_rest * 1.1

    def test_alpha_one_gives_infant_template(self, small_template):
        mesh, _ = forward(small_template, rest_params(alpha=1.0))
        ad.reset_tape()
        np.testing.assert_allclose(mesh.data, small_template.infant_vertices, atol=1e-13)

    def test_alpha_blends_linearly(self, small_template):
        m0, _ = forward(small_template, rest_params(alpha=0.0))
        m1, _ = forward(small_template, rest_params(alpha=1.0))
        mh, _ = forward(small_template, rest_params(alpha=0.5))
        ad.reset_tape()
        np.testing.assert_allclose(mh.data, 0.5 * (m0.data + m1.data), atol=1e-12)

    def test_infant_is_shorter(self, small_template):
        assert body.template_height(small_template) > 1.0
        infant_h = (small_template.infant_vertices[:, 1].max()
                    - small_template.infant_vertices[:, 1].min())
        assert infant_h < 0.6 * body.template_height(small_template)


class TestParamsVector:
    def test_flatten_round_trip(self, rng):
        p = rest_params(theta=identity_rot6d() + 0.1 * rng.normal(size=(NUM_JOINTS, 6)),
                        beta=rng.normal(size=NUM_SHAPE), alpha=0.3)
        q = BodyParams.from_flat(p.flatten())
        np.testing.assert_array_equal(p.theta, q.theta)
        np.testing.assert_array_equal(p.beta, q.beta)
        assert p.alpha == q.alpha

    def test_from_flat_clamps_alpha(self):
        vec = rest_params().flatten()
        vec[142] = 3.7
        assert BodyParams.from_flat(vec).alpha == 1.0
        vec[142] = -0.5
        assert BodyParams.from_flat(vec).alpha == 0.0

    def test_vector_length_is_143(self):
        assert rest_params().flatten().shape == (143,)


class TestSerialization:
    def test_save_load_is_exact(self, small_template, tmp_path):
        path = os.path.join(tmp_path, "template.bin")
        small_template.save(path)
        back = body.BodyTemplate.load(path)
        for name in ("vertices", "infant_vertices", "shape_dirs",
                     "joint_regressor", "skin_weights", "kin_tree"):
            np.testing.assert_array_equal(getattr(back, name), getattr(small_template, name))

    def test_bad_magic_rejected(self, tmp_path):
        path = os.path.join(tmp_path, "junk.bin")
        with open(path, "wb") as f:
            f.write(b"NOPE" + b"\0" * 64)
        with pytest.raises(BodyModelError):
            body.BodyTemplate.load(path)
