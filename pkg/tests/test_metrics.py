"""Metric oracles: Procrustes recovery, exhaustive pair checks, recall
normalization, matching, and the CSV round trip."""

import numpy as np
import pytest
import scipy.spatial.transform as st_rot
from hypothesis import given, settings
from hypothesis import strategies as st

from stmesh import metrics


def random_points(rng, n=22):
    return rng.normal(size=(n, 3))


class TestMpjpe:
    def test_zero_for_identical_sets(self, rng):
        p = random_points(rng)
        assert metrics.mpjpe(p, p) == 0.0

    def test_root_alignment_removes_translation(self, rng):
        p = random_points(rng)
        assert metrics.mpjpe(p, p + np.array([1.0, -2.0, 3.0])) == pytest.approx(0.0, abs=1e-9)
        assert metrics.mpjpe(p, p + 1.0, root_align=False) == pytest.approx(
            np.sqrt(3.0) * 1000.0
        )

    def test_reports_millimeters(self, rng):
        p = random_points(rng)
        q = p.copy()
        q[5] += np.array([0.001, 0.0, 0.0])  # 1 mm on one of 22 joints
        assert metrics.mpjpe(p, q, root_align=False) == pytest.approx(1.0 / 22)

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(ValueError):
            metrics.mpjpe(random_points(rng, 5), random_points(rng, 6))

    def test_mpve_equals_mpjpe_on_joint_sets(self, rng):
        p, q = random_points(rng), random_points(rng)
        assert metrics.mpve(p, q) == pytest.approx(metrics.mpjpe(p, q))


class TestProcrustes:
    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=100, deadline=None)
    def test_similarity_transform_fully_recovered(self, seed):
        rng = np.random.default_rng(seed)
        gt = random_points(rng)
        s = rng.uniform(0.5, 2.0)
        rot = st_rot.Rotation.random(random_state=rng).as_matrix()
        t = rng.normal(size=3)
        pred = s * gt @ rot.T + t
        assert metrics.pa_mpjpe(gt, pred) <= 1e-8

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=100, deadline=None)
    def test_never_exceeds_mpjpe(self, seed):
        rng = np.random.default_rng(seed)
        gt = random_points(rng)
        pred = gt + 0.3 * rng.normal(size=gt.shape)
        assert metrics.pa_mpjpe(gt, pred) <= metrics.mpjpe(gt, pred) + 1e-9

    def test_reflection_branch_excluded(self, rng):
        gt = random_points(rng)
        pred = gt * np.array([-1.0, 1.0, 1.0])  # mirrored
        s, rot, t = metrics.similarity_align(pred, gt)
        assert np.linalg.det(rot) == pytest.approx(1.0)

    def test_rank_deficient_falls_back_to_translation(self, rng, caplog):
        import logging

        line = np.zeros((5, 3))
        line[:, 0] = np.arange(5.0)
        with caplog.at_level(logging.WARNING, logger="stmesh.metrics"):
            s, rot, t = metrics.similarity_align(line, line + 2.0)
        assert s == 1.0
        np.testing.assert_array_equal(rot, np.eye(3))
        np.testing.assert_allclose(t, [2.0, 2.0, 2.0])

    def test_needs_three_points(self, rng):
        with pytest.raises(ValueError):
            metrics.pa_mpjpe(random_points(rng, 2), random_points(rng, 2))


class TestPcdr:
    def oracle(self, gt, pred, thr=0.2):
        def rel(a, b):
            d = a - b
            return 0 if abs(d) <= thr else (1 if d > 0 else -1)

        n = len(gt)
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
        correct = sum(rel(gt[i], gt[j]) == rel(pred[i], pred[j]) for i, j in pairs)
        return 100.0 * correct / len(pairs)

    @given(st.lists(st.floats(0.5, 10.0), min_size=2, max_size=6),
           st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=100, deadline=None)
    def test_matches_exhaustive_oracle(self, gt_depths, seed):
        rng = np.random.default_rng(seed)
        pred = [d + rng.normal() * 0.3 for d in gt_depths]
        assert metrics.pcdr(gt_depths, pred) == self.oracle(gt_depths, pred)

    def test_symmetric_and_shift_invariant(self, rng):
        gt = rng.uniform(1, 8, size=5)
        pred = gt + rng.normal(size=5) * 0.3
        base = metrics.pcdr(gt, pred)
        perm = rng.permutation(5)
        assert metrics.pcdr(gt[perm], pred[perm]) == base
        assert metrics.pcdr(gt + 7.0, pred + 7.0) == base

    def test_fewer_than_two_people_is_undefined(self):
        assert metrics.pcdr([3.0], [3.1]) is None

    def test_equality_band(self):
        # 0.15 m apart in GT: inside the band, so prediction must also be
        # inside the band to count
        assert metrics.pcdr([2.0, 2.15], [2.0, 2.1]) == 100.0
        assert metrics.pcdr([2.0, 2.15], [2.0, 2.5]) == 0.0


class TestNormalizedErrors:
    def test_reference_ratio(self):
        # published recall-normalization example: vertex error 100.7 at
        # recall 0.9298 normalizes to 108.3
        recall = 100.7 / 108.3
        total = 10_000
        detected = int(round(recall * total))
        nmve, _ = metrics.normalized_errors(100.7, 100.7, detected, total)
        assert abs(nmve - 108.3) / 108.3 < 0.005

    def test_no_detections_is_undefined(self):
        assert metrics.normalized_errors(50.0, 50.0, 0, 10) == (None, None)

    def test_full_recall_is_identity(self):
        nmve, nmje = metrics.normalized_errors(80.0, 70.0, 10, 10)
        assert nmve == 80.0 and nmje == 70.0

    def test_invalid_counts_rejected(self):
        with pytest.raises(ValueError):
            metrics.normalized_errors(50.0, 50.0, 11, 10)


class TestMatching:
    def test_greedy_prefers_high_scores(self):
        gt = [(0, 0), (5, 5)]
        pred = [(0.5, 0.0), (0.0, 0.5)]  # both near GT 0
        res = metrics.match(gt, pred, pred_scores=[0.1, 0.9])
        assert len(res.pairs) == 1
        assert res.pairs[0].pred == 1  # higher score claimed the GT
        assert res.misses == 1 and res.false_positives == 1

    def test_radius_enforced(self):
        res = metrics.match([(0, 0)], [(3.0, 0.0)], radius_cells=2.0)
        assert res.pairs == [] and res.misses == 1 and res.false_positives == 1

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_counts_always_consistent(self, seed):
        rng = np.random.default_rng(seed)
        gt = rng.uniform(0, 10, size=(rng.integers(0, 5), 2))
        pred = rng.uniform(0, 10, size=(rng.integers(0, 5), 2))
        res = metrics.match(gt, pred, pred_scores=rng.uniform(size=len(pred)))
        assert len(res.pairs) + res.misses == len(gt)
        assert len(res.pairs) + res.false_positives == len(pred)


class TestCsv:
    def test_round_trip_with_absent_metric(self, tmp_path):
        rows = [("mpjpe_mm", 42.123456, 10), ("pcdr_pct", None, 0)]
        path = tmp_path / "metrics.csv"
        metrics.write_metrics_csv(path, rows)
        back = metrics.read_metrics_csv(path)
        assert back["mpjpe_mm"] == (pytest.approx(42.123456), 10)
        assert back["pcdr_pct"] == (None, 0)
