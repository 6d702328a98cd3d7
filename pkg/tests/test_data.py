"""Synthetic scenes, KITTI formats, preprocessing and dataset files."""

import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from odoflow import data as D
from odoflow import geometry as G


def recipe(**kw):
    base = dict(n_points=256, n_objects=0, ego_rot_deg=0.0, ego_trans=0.0, object_motion=0.0,
                occlusion=0.0, noise=0.0, seed=3)
    base.update(kw)
    return D.SceneRecipe(**base)


def rz(deg):
    a = math.radians(deg)
    return np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]])


class TestSynthetic:
    def test_identity_recipe(self):
        pr = D.gen_synthetic_pair(recipe(n_objects=2))
        assert np.array_equal(pr.P, pr.Q)
        assert np.all(pr.gt_flow == 0)

    def test_pure_rotation(self):
        pr = D.gen_synthetic_pair(recipe(ego_rot_deg=10.0, fixed_ego=True))
        expected = pr.P @ rz(10.0).T - pr.P
        np.testing.assert_allclose(pr.gt_flow, expected, atol=1e-12)

    @pytest.mark.parametrize("n", [100, 256, 511])
    def test_occlusion_count(self, n):
        pr = D.gen_synthetic_pair(recipe(n_points=n, occlusion=0.2, n_objects=2, object_motion=0.5))
        k = math.ceil(0.2 * n)
        assert pr.occ_labels.sum() == k
        assert len(pr.Q) == n - k
        np.testing.assert_allclose(pr.Q, (pr.P + pr.gt_flow)[pr.occ_labels == 0], atol=1e-12)

    def test_occluded_sector_is_contiguous(self):
        pr = D.gen_synthetic_pair(recipe(occlusion=0.1))
        az = np.arctan2(pr.P[:, 1], pr.P[:, 0])
        occ_az = az[pr.occ_labels == 1]
        inside = (az >= occ_az.min()) & (az <= occ_az.max())
        assert np.array_equal(inside, pr.occ_labels == 1)

    @given(st.integers(0, 500))
    def test_static_points_follow_ego(self, seed):
        pr = D.gen_synthetic_pair(recipe(seed=seed, n_objects=2, ego_rot_deg=3, ego_trans=0.5,
                                         object_motion=0.5, occlusion=0.1))
        static = pr.dyn_labels == D.STATIC
        np.testing.assert_allclose(pr.gt_flow[static], G.pose_apply(pr.gt_pose, pr.P[static]) - pr.P[static],
                                   atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(pr.gt_pose.q), 1.0)

    def test_noise_level(self):
        pr = D.gen_synthetic_pair(recipe(n_points=2000, noise=0.01))
        assert np.std(pr.Q - (pr.P + pr.gt_flow)) == pytest.approx(0.01, rel=0.1)

    def test_deterministic(self):
        a, b = D.gen_synthetic_pair(recipe(n_objects=2)), D.gen_synthetic_pair(recipe(n_objects=2))
        assert np.array_equal(a.P, b.P) and np.array_equal(a.gt_flow, b.gt_flow)

    def test_dataset_seeds(self):
        pairs = D.make_synthetic_dataset(recipe(), 3)
        assert [p.name for p in pairs] == ["synthetic_00003", "synthetic_00004", "synthetic_00005"]

    @pytest.mark.parametrize("kw", [{"occlusion": 1.0}, {"noise": -1.0}, {"n_points": 0},
                                    {"range_min": 5.0, "range_max": 4.0}])
    def test_bad_recipe(self, kw):
        with pytest.raises(ValueError):
            recipe(**kw)

    def test_label_length_checked(self):
        with pytest.raises(ValueError, match="dyn_labels"):
            D.FramePair(np.zeros((3, 3)), np.zeros((3, 3)), dyn_labels=np.zeros(2))


class TestKittiBin:
    def test_two_records(self, tmp_path):
        path = tmp_path / "a.bin"
        path.write_bytes(struct.pack("<8f", 1, 2, 3, 0.5, 4, 5, 6, 0.1))
        np.testing.assert_array_equal(D.load_kitti_bin(path), [[1, 2, 3], [4, 5, 6]])

    def test_empty(self, tmp_path):
        path = tmp_path / "e.bin"
        path.write_bytes(b"")
        assert D.load_kitti_bin(path).shape == (0, 3)

    def test_round_trip(self, tmp_path, rng):
        pts = rng.normal(size=(50, 3)) * 20
        D.write_kitti_bin(tmp_path / "r.bin", pts)
        np.testing.assert_array_equal(D.load_kitti_bin(tmp_path / "r.bin"), pts.astype(np.float32))

    def test_partial_record(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"\0" * 40)
        with pytest.raises(ValueError, match="byte offset 32"):
            D.load_kitti_bin(path)


class TestKittiPoses:
    def test_identity_line(self, tmp_path):
        path = tmp_path / "poses.txt"
        path.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n")
        (pose,) = D.load_kitti_poses(path)
        np.testing.assert_array_equal(pose.q, [1, 0, 0, 0])
        np.testing.assert_array_equal(pose.t, 0)

    def test_identical_poses_relative_identity(self, tmp_path):
        line = "0 -1 0 1 1 0 0 2 0 0 1 3\n"
        path = tmp_path / "p.txt"
        path.write_text(line * 2)
        (rel,) = D.relative_poses(D.load_kitti_poses(path))
        np.testing.assert_allclose(rel.matrix(), np.eye(4), atol=1e-12)

    def test_random_round_trip(self, tmp_path, rng):
        mats = []
        for _ in range(10):
            R, _ = np.linalg.qr(rng.normal(size=(3, 3)))
            R *= np.sign(np.linalg.det(R))
            mats.append(np.c_[R, rng.normal(size=3)])
        path = tmp_path / "p.txt"
        path.write_text("\n".join(" ".join(repr(float(v)) for v in M.ravel()) for M in mats) + "\n")
        poses = D.load_kitti_poses(path)
        for M, pose in zip(mats, poses):
            assert pose.q[0] >= 0
            np.testing.assert_allclose(G.quat_to_matrix(pose.q), M[:, :3], atol=1e-9)
            np.testing.assert_array_equal(pose.t, M[:, 3])
        rel = D.relative_poses(poses)
        A, B = np.vstack([mats[0], [0, 0, 0, 1]]), np.vstack([mats[1], [0, 0, 0, 1]])
        np.testing.assert_allclose(rel[0].matrix(), np.linalg.inv(A) @ B, atol=1e-9)

    def test_wrong_count(self, tmp_path):
        path = tmp_path / "p.txt"
        path.write_text("1 0 0 0 0 1 0 0 0 0 1\n")
        with pytest.raises(ValueError, match=":1: expected 12"):
            D.load_kitti_poses(path)

    def test_non_numeric(self, tmp_path):
        path = tmp_path / "p.txt"
        path.write_text("1 0 0 0 0 1 0 0 0 0 1 x\n")
        with pytest.raises(ValueError, match=":1: non-numeric"):
            D.load_kitti_poses(path)

    def test_not_orthonormal(self, tmp_path):
        path = tmp_path / "p.txt"
        path.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n2 0 0 0 0 1 0 0 0 0 1 0\n")
        with pytest.raises(ValueError, match=":2:"):
            D.load_kitti_poses(path)


class TestPreprocess:
    def test_ground_all_above(self, rng):
        pc = rng.uniform(0, 1, size=(10, 3))
        assert np.array_equal(D.remove_ground(pc), pc)

    def test_ground_mixed(self):
        pc = np.array([[0, 0, -2.0], [1, 0, 0.0], [2, 0, -1.5], [3, 0, -3.0], [4, 0, 1.0]])
        np.testing.assert_array_equal(D.remove_ground(pc), pc[[1, 4]])

    def test_ground_minus_inf(self, rng):
        pc = rng.normal(size=(10, 3)) * 10
        assert np.array_equal(D.remove_ground(pc, -np.inf), pc)

    def test_ground_everything(self):
        with pytest.raises(ValueError, match="removed all"):
            D.remove_ground(np.full((3, 3), -5.0))

    def test_sample_permutation(self, rng):
        pc = rng.normal(size=(20, 3))
        out = D.sample_to_n(pc, 20, seed=1)
        assert sorted(map(tuple, out)) == sorted(map(tuple, pc))

    def test_sample_with_replacement(self):
        pc = np.array([[0.0, 0, 0], [1, 1, 1]])
        out = D.sample_to_n(pc, 4, seed=0)
        assert out.shape == (4, 3) and all(any((r == p).all() for p in pc) for r in out)

    def test_sample_deterministic(self, rng):
        pc = rng.normal(size=(30, 3))
        assert np.array_equal(D.sample_to_n(pc, 10, 5), D.sample_to_n(pc, 10, 5))

    def test_sample_empty(self):
        with pytest.raises(ValueError):
            D.sample_to_n(np.zeros((0, 3)), 4)

    def test_kitti_pair(self, tmp_path, rng):
        for name in ("a", "b"):
            D.write_kitti_bin(tmp_path / f"{name}.bin", rng.uniform(-1, 1, size=(40, 3)))
        pr = D.kitti_pair(tmp_path / "a.bin", tmp_path / "b.bin", n=32, z_thresh=-0.5)
        assert pr.P.shape == (32, 3) and pr.Q.shape == (32, 3) and np.all(pr.P[:, 2] >= -0.5)


class TestBatchAndFiles:
    def test_stack(self):
        pairs = D.make_synthetic_dataset(recipe(occlusion=0.1, n_objects=1, object_motion=0.3), 2)
        b = D.stack_batch(pairs, seed=0)
        assert b["P"].shape == (2, 256, 3) and b["Q"].shape == (2, 256, 3)
        assert b["q"].shape == (2, 4) and b["dyn"].shape == (2, 256)

    def test_stack_wrong_size(self):
        pr = D.gen_synthetic_pair(recipe())
        with pytest.raises(ValueError, match="expected 100"):
            D.stack_batch([pr], n=100)

    def test_dataset_round_trip(self, tmp_path):
        pairs = D.make_synthetic_dataset(recipe(n_objects=2, object_motion=0.3, occlusion=0.1, noise=0.01), 2)
        D.save_dataset(tmp_path, pairs, meta={"k": 1})
        back = D.load_dataset(tmp_path)
        for a, b in zip(pairs, back):
            assert a.name == b.name
            for attr in ("P", "Q", "gt_flow", "dyn_labels", "occ_labels"):
                assert np.array_equal(getattr(a, attr), getattr(b, attr))
            np.testing.assert_array_equal(a.gt_pose.q, b.gt_pose.q)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="manifest"):
            D.load_dataset(tmp_path)
