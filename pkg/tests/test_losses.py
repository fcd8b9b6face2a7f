"""Objective terms: target rendering, masked losses, the pose prior, and the
zero-loss fixed point at perfect predictions."""

import math

import numpy as np
import pytest

import stmesh.autodiff as ad
from stmesh import body, heads, losses
from stmesh.camera import CameraIntrinsics


def person_at(template, rng, depth=3.0, jitter=0.0):
    theta = body.identity_rot6d()
    if jitter:
        theta = theta + jitter * rng.normal(size=theta.shape)
    params = body.BodyParams(
        theta=theta, beta=0.5 * rng.normal(size=10), alpha=0.0,
        trans=np.array([0.0, 0.0, depth]),
    )
    # place the posed pelvis exactly on the requested depth axis point
    probe_mesh, probe_joints = body.forward(template, params)
    params.trans = params.trans + (np.array([0.0, 0.0, depth]) - probe_joints.data[0])
    _, joints = body.forward(template, params)
    ad.reset_tape()
    return losses.GroundTruthPerson(params=params, joints=joints.data)


class TestRenderTargets:
    def test_center_cell_holds_depth_and_params(self, small_template, rng):
        cam = CameraIntrinsics.default_for_image(64, 64)
        person = person_at(small_template, rng)
        gt = losses.render_targets([person], (16, 16), cam, cell_px=4.0)
        assert len(gt.persons) == 1
        r, c = person.center_cell
        assert gt.center_mask[r, c]
        assert gt.md[0, r, c] == pytest.approx(person.joints[0, 2], abs=1e-12)
        np.testing.assert_array_equal(gt.ms[:, r, c], person.params.flatten())

    def test_heatmap_peaks_at_joint_cells(self, small_template, rng):
        cam = CameraIntrinsics.default_for_image(64, 64)
        person = person_at(small_template, rng)
        gt = losses.render_targets([person], (16, 16), cam, cell_px=4.0)
        uv, _ = cam.project(person.joints)
        for j in range(body.NUM_JOINTS):
            r, c = np.unravel_index(np.argmax(gt.m2d[j]), gt.m2d[j].shape)
            jc, jr = uv[j] / 4.0 - 0.5
            assert abs(r - jr) <= 1.0 and abs(c - jc) <= 1.0

    def test_offsets_are_subcell(self, small_template, rng):
        cam = CameraIntrinsics.default_for_image(64, 64)
        gt = losses.render_targets([person_at(small_template, rng)], (16, 16), cam, 4.0)
        assert np.abs(gt.mo[0][gt.joint_mask]).max() <= 0.5 + 1e-12
        assert np.abs(gt.mo[1][gt.joint_mask]).max() <= 0.5 + 1e-12

    def test_out_of_grid_person_skipped_with_warning(self, small_template, rng, caplog):
        import logging

        cam = CameraIntrinsics.default_for_image(64, 64)
        person = person_at(small_template, rng)
        person.joints = person.joints + np.array([50.0, 0.0, 0.0])  # off screen
        with caplog.at_level(logging.WARNING, logger="stmesh.losses"):
            gt = losses.render_targets([person], (16, 16), cam, cell_px=4.0)
        assert gt.persons == []
        assert not gt.center_mask.any()
        assert any("outside" in rec.message for rec in caplog.records)


class TestMaskedLosses:
    def test_empty_mask_is_exact_zero(self, rng):
        pred = ad.parameter(rng.normal(size=(2, 3)))
        out = losses._masked_mse(pred, np.zeros((2, 3)), np.zeros((2, 3), dtype=bool))
        assert float(out.data) == 0.0
        ad.reset_tape()

    def test_masked_mse_ignores_unmasked_cells(self, rng):
        pred = ad.tensor(np.array([[1.0, 99.0], [2.0, -99.0]]))
        target = np.array([[1.5, 0.0], [2.5, 0.0]])
        mask = np.array([[True, False], [True, False]])
        out = float(losses._masked_mse(pred, target, mask).data)
        ad.reset_tape()
        assert out == pytest.approx(0.25)


class TestPosePrior:
    def test_single_gaussian_matches_closed_form(self, rng):
        prior = losses.GaussianMixturePrior.identity_default()
        theta = body.identity_rot6d() + 0.1 * rng.normal(size=(22, 6))
        nll = float(prior.nll(theta).data)
        ad.reset_tape()
        diff = (theta - body.identity_rot6d()).reshape(-1)
        expect = 0.5 * (diff @ diff) + 0.5 * 132 * math.log(2 * math.pi)
        assert nll == pytest.approx(expect, rel=1e-12)

    def test_mixture_matches_logsumexp_oracle(self, rng):
        import scipy.stats

        dim = 6
        prior = losses.GaussianMixturePrior(
            weights=np.array([0.3, 0.7]),
            means=rng.normal(size=(2, dim)),
            variances=rng.uniform(0.5, 2.0, size=(2, dim)),
        )
        x = rng.normal(size=(1, dim))
        nll = float(prior.nll(ad.tensor(x.reshape(1, dim))).data)
        ad.reset_tape()
        dens = sum(
            w * scipy.stats.multivariate_normal(m, np.diag(v)).pdf(x[0])
            for w, m, v in zip(prior.weights, prior.means, prior.variances)
        )
        assert nll == pytest.approx(-math.log(dens), rel=1e-10)

    def test_identity_pose_minimizes_default_prior(self, rng):
        prior = losses.GaussianMixturePrior.identity_default()
        at_mean = float(prior.nll(body.identity_rot6d()).data)
        ad.reset_tape()
        perturbed = float(prior.nll(
            body.identity_rot6d() + 0.3 * rng.normal(size=(22, 6))).data)
        ad.reset_tape()
        assert at_mean < perturbed

    def test_save_load_round_trip(self, rng, tmp_path):
        prior = losses.GaussianMixturePrior(
            weights=np.array([0.4, 0.6]), means=rng.normal(size=(2, 5)),
            variances=rng.uniform(0.1, 2.0, size=(2, 5)),
        )
        path = tmp_path / "prior.txt"
        prior.save(path)
        back = losses.GaussianMixturePrior.load(path)
        np.testing.assert_array_equal(back.weights, prior.weights)
        np.testing.assert_array_equal(back.means, prior.means)
        np.testing.assert_array_equal(back.variances, prior.variances)


class TestTotalLoss:
    def _perfect_maps(self, gt):
        return heads.MapSet(
            m2d=ad.parameter(gt.m2d.copy()), mo=ad.parameter(gt.mo.copy()),
            md=ad.parameter(gt.md.copy()), ms=ad.parameter(gt.ms.copy()),
        )

    def test_all_map_terms_vanish_at_ground_truth(self, small_template, rng):
        cam = CameraIntrinsics.default_for_image(64, 64)
        person = person_at(small_template, rng, jitter=0.05)
        gt = losses.render_targets([person], (16, 16), cam, cell_px=4.0)
        maps = self._perfect_maps(gt)
        total, terms = losses.total_loss(
            maps, gt, losses.LossWeights(), small_template, cam, 4.0
        )
        ad.reset_tape()
        for key in ("l_2d", "l_o", "l_d", "l_theta", "l_beta", "l_alpha"):
            assert terms[key] == pytest.approx(0.0, abs=1e-20), key
        # the joint loss is limited by the sub-cell pelvis quantization of
        # the detection grid, not exactly zero
        assert terms["l_j"] < 1e-3
        # the prior keeps the total positive by design
        assert terms["total"] == pytest.approx(
            losses.LossWeights().w_p * terms["l_p"] + 360 * terms["l_j"], rel=1e-9
        )

    def test_gradient_flows_to_every_map(self, small_template, rng):
        cam = CameraIntrinsics.default_for_image(64, 64)
        person = person_at(small_template, rng)
        gt = losses.render_targets([person], (16, 16), cam, cell_px=4.0)
        maps = heads.MapSet(
            m2d=ad.parameter(np.clip(gt.m2d + 0.1, 0.01, 0.99)),
            mo=ad.parameter(gt.mo + 0.05),
            md=ad.parameter(gt.md + 0.2),
            ms=ad.parameter(gt.ms + 0.05 * rng.normal(size=gt.ms.shape)),
        )
        total, _ = losses.total_loss(
            maps, gt, losses.LossWeights(), small_template, cam, 4.0
        )
        ad.backward(total)
        for t in (maps.m2d, maps.mo, maps.md, maps.ms):
            assert t.grad is not None and np.isfinite(t.grad).all()
        assert np.abs(maps.ms.grad).max() > 0

    def test_weights_scale_terms(self, small_template, rng):
        cam = CameraIntrinsics.default_for_image(64, 64)
        person = person_at(small_template, rng)
        gt = losses.render_targets([person], (16, 16), cam, cell_px=4.0)
        maps = heads.MapSet(
            m2d=ad.tensor(np.clip(gt.m2d + 0.1, 0, 1)), mo=ad.tensor(gt.mo),
            md=ad.tensor(gt.md), ms=ad.tensor(gt.ms),
        )
        _, base = losses.total_loss(maps, gt, losses.LossWeights(),
                                    small_template, cam, 4.0)
        ad.reset_tape()
        _, doubled = losses.total_loss(
            maps, gt, losses.LossWeights(w_pose=320.0), small_template, cam, 4.0
        )
        ad.reset_tape()
        delta = doubled["total"] - base["total"]
        assert delta == pytest.approx(160.0 * base["l_2d"], rel=1e-9)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            losses.LossWeights(w_j=-1.0)
