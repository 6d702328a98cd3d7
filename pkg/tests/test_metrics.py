"""Flow, pose and mask metrics."""

import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from odoflow import geometry as G
from odoflow.metrics import (FlowMetrics, flow_metrics, format_table, mask_metrics, pose_metrics, rank_auc,
                             to_json)


def brute_flow(pred, gt):
    """Per-point loop with the threshold definitions written out."""
    s = r = o = e_sum = 0.0
    for p, g in zip(pred, gt):
        e = math.sqrt(sum((a - b) ** 2 for a, b in zip(p, g)))
        rel = e / (math.sqrt(sum(b * b for b in g)) + 1e-4)
        e_sum += e
        s += e < 0.05 or rel < 0.05
        r += e < 0.1 or rel < 0.1
        o += e > 0.3 or rel > 0.1
    n = len(pred)
    return FlowMetrics(e_sum / n, s / n, r / n, o / n)


def brute_auc(scores, pos):
    p, n = scores[pos], scores[~pos]
    wins = sum((a > b) + 0.5 * (a == b) for a in p for b in n)
    return wins / (len(p) * len(n))


class TestFlow:
    def test_perfect(self, rng):
        gt = rng.normal(size=(10, 3))
        assert flow_metrics(gt, gt) == FlowMetrics(0.0, 1.0, 1.0, 0.0)

    def test_small_error(self):
        m = flow_metrics([[1.04, 0, 0]], [[1.0, 0, 0]])
        assert m.acc3ds == 1.0 and m.epe3d == pytest.approx(0.04)

    def test_outlier(self):
        m = flow_metrics([[1.35, 0, 0]], [[1.0, 0, 0]])
        assert (m.outliers3d, m.acc3ds, m.acc3dr) == (1.0, 0.0, 0.0)

    @pytest.mark.parametrize("trial", range(10))
    def test_brute_force(self, trial):
        rng = np.random.default_rng(trial)
        gt = rng.normal(size=(200, 3)) * rng.uniform(0, 1, size=(200, 1))
        pred = gt + rng.normal(size=(200, 3)) * 0.1
        assert flow_metrics(pred, gt).to_dict() == pytest.approx(brute_flow(pred, gt).to_dict(), abs=1e-12)

    @given(st.integers(0, 10_000), st.floats(0.001, 1.0))
    def test_strict_below_relaxed(self, seed, scale):
        rng = np.random.default_rng(seed)
        gt = rng.normal(size=(30, 3))
        m = flow_metrics(gt + rng.normal(size=(30, 3)) * scale, gt)
        assert m.acc3ds <= m.acc3dr
        assert all(0 <= v <= 1 for v in (m.acc3ds, m.acc3dr, m.outliers3d)) and m.epe3d >= 0

    def test_batched_input_pooled(self, rng):
        gt = rng.normal(size=(2, 5, 3))
        pred = gt + 0.2
        assert flow_metrics(pred, gt) == flow_metrics(pred.reshape(-1, 3), gt.reshape(-1, 3))

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="vectors"):
            flow_metrics(np.zeros((3, 3)), np.zeros((4, 3)))


class TestPose:
    def test_identical(self, rng):
        q = G.quat_normalize(rng.normal(size=4))
        t = rng.normal(size=3)
        assert pose_metrics(q, t, q, t) == {"t_err_m": 0.0, "rot_err_deg": pytest.approx(0.0, abs=1e-6)}

    def test_ten_degrees(self):
        q = G.axis_angle_quat([0, 0, 1], math.radians(10))
        res = pose_metrics(q, np.zeros(3), [1.0, 0, 0, 0], np.zeros(3))
        assert res["rot_err_deg"] == pytest.approx(10.0, abs=1e-6)

    def test_sign_flip(self, rng):
        q = G.quat_normalize(rng.normal(size=4))
        assert pose_metrics(-q, np.zeros(3), q, np.zeros(3))["rot_err_deg"] == pytest.approx(0.0, abs=1e-6)

    def test_translation(self):
        assert pose_metrics([1.0, 0, 0, 0], [3.0, 4, 0], [1.0, 0, 0, 0], [0.0, 0, 0])["t_err_m"] == 5.0


class TestMask:
    def test_exact_labels(self):
        dyn = np.array([1, 0, 1, 0, 0])
        res = mask_metrics(1.0 - dyn, dyn)
        assert res == {"balanced_accuracy": 1.0, "auc": 1.0}

    def test_constant_half(self):
        assert mask_metrics(np.full(4, 0.5), [1, 0, 1, 0])["balanced_accuracy"] == 0.5

    def test_hand_case(self):
        res = mask_metrics([0.1, 0.3, 0.6, 0.9], [1, 1, 0, 0])
        assert res == {"balanced_accuracy": 1.0, "auc": 1.0}

    def test_single_class(self):
        with pytest.raises(ValueError, match="one class"):
            mask_metrics([0.2, 0.9], [0, 0])

    @given(st.integers(0, 10_000))
    def test_auc_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        scores = rng.integers(0, 5, size=12).astype(float)    # plenty of ties
        pos = np.zeros(12, dtype=bool)
        pos[rng.choice(12, 5, replace=False)] = True
        assert rank_auc(scores, pos) == pytest.approx(brute_auc(scores, pos))


class TestOutput:
    def test_json(self, tmp_path):
        text = to_json({"flow": FlowMetrics(0.1, 0.2, 0.3, 0.4)}, tmp_path / "m.json")
        data = json.loads((tmp_path / "m.json").read_text())
        assert data["flow"]["epe3d"] == 0.1 and "pooled" in data["aggregation"]
        assert json.loads(text) == data

    def test_table(self):
        table = format_table({"ours": FlowMetrics(0.1234, 0.5, 0.75, 0.25)}).splitlines()
        assert table[0].split() == ["Method", "EPE3D(m)", "Acc3DS", "Acc3DR", "Outliers3D"]
        assert table[2].split() == ["ours", "0.1234", "0.5000", "0.7500", "0.2500"]
        assert len({len(line) for line in table}) == 1
