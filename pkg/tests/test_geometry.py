"""Sampling, neighbourhoods, interpolation, quaternions, poses and PLY files."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from odoflow import geometry as G
from odoflow import tensor as T

coords = arrays(np.float64, st.tuples(st.integers(4, 24), st.just(3)),
                elements=st.floats(-10, 10, allow_nan=False, width=32))


def random_quat(rng):
    return G.quat_normalize(rng.normal(size=4))


def matrix_oracle(q):
    """Rotation matrix written out from the quaternion entries."""
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def brute_knn(query, ref, k):
    d = ((query[:, None, :] - ref[None, :, :]) ** 2).sum(-1)
    return np.array([sorted(range(len(ref)), key=lambda j: (row[j], j))[:k] for row in d])


class TestFps:
    def test_collinear(self):
        pts = np.array([[0.0, 0, 0], [1, 0, 0], [10, 0, 0]])
        assert sorted(G.fps(pts, 2, 0)) == [0, 2]

    def test_all_points(self, rng):
        pts = rng.normal(size=(9, 3))
        assert sorted(G.fps(pts, 9)) == list(range(9))

    @pytest.mark.parametrize("seed", [0, 3, 8])
    def test_single_point_is_seed(self, rng, seed):
        assert list(G.fps(rng.normal(size=(9, 3)), 1, seed)) == [seed]

    def test_too_many(self, rng):
        with pytest.raises(ValueError):
            G.fps(rng.normal(size=(4, 3)), 5)

    @given(coords, st.integers(1, 4))
    def test_greedy_max_min(self, pts, m):
        idx = list(G.fps(pts, m, 0))
        assert len(set(idx)) == m
        for step in range(1, m):
            chosen = pts[idx[:step]]
            d = np.min(((pts[:, None] - chosen[None]) ** 2).sum(-1), axis=1)
            # the selected point attains the maximal min-distance (first such index)
            best = np.flatnonzero(d == d.max())[0]
            assert d[idx[step]] == d.max()
            assert idx[step] == best or d[idx[step]] == d[best]


class TestKnn:
    def test_self_first(self, rng):
        pts = rng.normal(size=(12, 3))
        np.testing.assert_array_equal(G.knn(pts, pts, 1)[:, 0], np.arange(12))

    def test_full_permutation(self, rng):
        pts = rng.normal(size=(6, 3))
        idx = G.knn(pts[:2], pts, 6)
        assert all(sorted(r) == list(range(6)) for r in idx)

    def test_k_too_large(self, rng):
        with pytest.raises(ValueError):
            G.knn(rng.normal(size=(2, 3)), rng.normal(size=(3, 3)), 4)

    def test_ties_by_lower_index(self):
        ref = np.array([[1.0, 0, 0], [-1, 0, 0], [0, 1, 0], [0, 0, 5]])
        np.testing.assert_array_equal(G.knn(np.zeros((1, 3)), ref, 3), [[0, 1, 2]])

    @pytest.mark.parametrize("trial", range(5))
    def test_brute_force(self, trial):
        rng = np.random.default_rng(trial)
        q, r = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
        np.testing.assert_array_equal(G.knn(q, r, 4), brute_knn(q, r, 4))


class TestThreeNN:
    def test_coincident_target(self, rng):
        src = rng.normal(size=(1, 6, 3))
        vals = rng.normal(size=(1, 6, 2))
        out = G.three_nn_interpolate(src[:, 2:3], src, vals).data
        np.testing.assert_allclose(out[0, 0], vals[0, 2], atol=1e-6)

    def test_constant_field(self, rng):
        src, tgt = rng.normal(size=(2, 8, 3)), rng.normal(size=(2, 5, 3))
        out = G.three_nn_interpolate(tgt, src, np.full((2, 8, 3), 1.25)).data
        np.testing.assert_allclose(out, 1.25, atol=1e-12)

    def test_equidistant(self):
        src = np.array([[[1.0, 0, 0], [-0.5, math.sqrt(3) / 2, 0], [-0.5, -math.sqrt(3) / 2, 0], [9, 9, 9]]])
        vals = np.array([[[3.0], [6.0], [9.0], [100.0]]])
        out = G.three_nn_interpolate(np.zeros((1, 1, 3)), src, vals).data
        assert out[0, 0, 0] == pytest.approx(6.0, abs=1e-9)

    def test_errors(self, rng):
        with pytest.raises(ValueError, match="at least 3"):
            G.three_nn_interpolate(np.zeros((1, 1, 3)), np.zeros((1, 2, 3)), np.zeros((1, 2, 1)))
        with pytest.raises(ValueError, match="non-finite"):
            G.three_nn_interpolate(np.zeros((1, 1, 3)), rng.normal(size=(1, 4, 3)), np.full((1, 4, 1), np.nan))

    @given(st.integers(0, 10_000))
    def test_convex_hull_bound(self, seed):
        rng = np.random.default_rng(seed)
        src, tgt, vals = rng.normal(size=(1, 7, 3)), rng.normal(size=(1, 4, 3)), rng.normal(size=(1, 7, 2))
        out = G.three_nn_interpolate(tgt, src, vals).data[0]
        idx = G.knn(tgt[0], src[0], 3)
        sel = vals[0][idx]
        assert np.all(out >= sel.min(axis=1) - 1e-12) and np.all(out <= sel.max(axis=1) + 1e-12)


class TestQuaternions:
    def test_identity_product(self, rng):
        q = random_quat(rng)
        np.testing.assert_allclose(G.quat_multiply([1, 0, 0, 0], q), q)

    def test_inverse(self, rng):
        q = rng.normal(size=4)
        np.testing.assert_allclose(G.quat_multiply(q, G.quat_inverse(q)), [1, 0, 0, 0], atol=1e-9)

    @pytest.mark.parametrize("trial", range(10))
    def test_product_matches_matrix_product(self, trial):
        rng = np.random.default_rng(trial)
        a, b = random_quat(rng), random_quat(rng)
        np.testing.assert_allclose(matrix_oracle(G.quat_multiply(a, b)), matrix_oracle(a) @ matrix_oracle(b),
                                   atol=1e-9)

    @given(st.integers(0, 10_000))
    def test_norm_multiplicative_and_associative(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = rng.normal(size=(3, 4))
        assert np.linalg.norm(G.quat_multiply(a, b)) == pytest.approx(np.linalg.norm(a) * np.linalg.norm(b),
                                                                       rel=1e-9)
        np.testing.assert_allclose(G.quat_multiply(G.quat_multiply(a, b), c),
                                   G.quat_multiply(a, G.quat_multiply(b, c)), atol=1e-9)

    def test_matrix_round_trip(self, rng):
        for _ in range(20):
            q = G.canonical = random_quat(rng)
            q = q if q[0] >= 0 else -q
            np.testing.assert_allclose(G.matrix_to_quat(G.quat_to_matrix(q)), q, atol=1e-9)

    def test_rejects_non_rotation(self):
        with pytest.raises(ValueError, match="rotation"):
            G.matrix_to_quat(np.diag([1.0, 1.0, 1.1]))


class TestPose:
    def test_identity(self, rng):
        p = rng.normal(size=(5, 3))
        np.testing.assert_array_equal(G.pose_apply(G.Pose.identity(), p), p)

    def test_quarter_turn(self):
        pose = G.Pose(G.axis_angle_quat([0, 0, 1], math.pi / 2), np.zeros(3))
        np.testing.assert_allclose(G.pose_apply(pose, np.array([1.0, 0, 0])), [0, 1, 0], atol=1e-9)

    def test_non_unit_rejected(self):
        with pytest.raises(ValueError, match="unit"):
            G.pose_apply(G.Pose(np.array([2.0, 0, 0, 0]), np.zeros(3)), np.zeros(3))

    def test_matches_homogeneous_matrix(self, rng):
        for _ in range(20):
            pose = G.Pose(random_quat(rng), rng.normal(size=3))
            p = rng.normal(size=(6, 3))
            M = np.eye(4)
            M[:3, :3], M[:3, 3] = matrix_oracle(pose.q), pose.t
            expected = (np.c_[p, np.ones(6)] @ M.T)[:, :3]
            np.testing.assert_allclose(G.pose_apply(pose, p), expected, atol=1e-9)

    @given(st.integers(0, 10_000))
    def test_isometry(self, seed):
        rng = np.random.default_rng(seed)
        pose = G.Pose(random_quat(rng), rng.normal(size=3) * 5)
        a, b = rng.normal(size=(2, 3)) * 10
        d0 = np.linalg.norm(a - b)
        d1 = np.linalg.norm(G.pose_apply(pose, a) - G.pose_apply(pose, b))
        assert d1 == pytest.approx(d0, abs=1e-9)

    def test_compose_and_inverse(self, rng):
        a, b = G.Pose(random_quat(rng), rng.normal(size=3)), G.Pose(random_quat(rng), rng.normal(size=3))
        np.testing.assert_allclose(a.compose(b).matrix(), a.matrix() @ b.matrix(), atol=1e-12)
        np.testing.assert_allclose(a.compose(a.inverse()).matrix(), np.eye(4), atol=1e-12)

    def test_tensor_version_matches(self, rng):
        q = np.stack([random_quat(rng) for _ in range(2)])
        t, p = rng.normal(size=(2, 3)), rng.normal(size=(2, 5, 3))
        out = G.pose_apply_t(T.Tensor(q), T.Tensor(t), T.Tensor(p)).data
        for i in range(2):
            np.testing.assert_allclose(out[i], G.pose_apply(G.Pose(q[i], t[i]), p[i]), atol=1e-12)

    def test_normalize_guard(self):
        out = G.normalize_quat_t(T.Tensor(np.zeros((1, 4)))).data
        np.testing.assert_allclose(out, [[1, 0, 0, 0]])
        np.testing.assert_allclose(G.normalize_quat_t(T.Tensor([[0.6, 0.8, 0, 0]])).data, [[0.6, 0.8, 0, 0]],
                                   atol=1e-7)


class TestPly:
    def test_round_trip(self, rng, tmp_path):
        pts = rng.normal(size=(7, 3))
        colors = rng.integers(0, 255, size=(7, 3))
        G.write_ply(tmp_path / "a.ply", pts, colors=colors, extra={"mask": np.arange(7.0)})
        back, props = G.read_ply(tmp_path / "a.ply")
        np.testing.assert_array_equal(back, pts)
        np.testing.assert_array_equal(props["red"], colors[:, 0])
        np.testing.assert_array_equal(props["mask"], np.arange(7.0))

    def test_not_ply(self, tmp_path):
        (tmp_path / "x.ply").write_text("hello\nend_header\n")
        with pytest.raises(ValueError, match="not a PLY"):
            G.read_ply(tmp_path / "x.ply")
