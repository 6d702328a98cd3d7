"""Coarse scene-flow and pose initialization from the initial cost volume."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as G
from . import tensor as T
from .costvolume import OccPerceptionCostVolume
from .encoder import SetUpConv, set_conv

QUAT_EPS = 1e-8


@dataclass
class FlowState:
    sf: T.Tensor    # B, N3, 3
    occ: T.Tensor   # B, N3, 1
    ff: T.Tensor    # B, N3, C
    sf_coarse: T.Tensor = None


@dataclass
class PoseState:
    q: T.Tensor     # B, 4 unit
    t: T.Tensor     # B, 3
    mask: T.Tensor  # static mask M, B, N4, 1
    w: T.Tensor     # embedding mask W, B, N4, C (softmax over points)
    ef: T.Tensor    # B, N4, C


def masked_pool(w, x):
    """Sum over points of ``w ⊙ x``: (B, N, C) x (B, N, C) -> (B, C)."""
    return T.tsum(w * x, axis=1)


def point_softmax(logits):
    """Per-channel softmax over the point axis."""
    return T.softmax(logits, axis=1)


def static_mask(w, fc):
    """M = sigmoid(FC(N * W)); N * W has unit mean per channel at any resolution."""
    n = w.shape[1]
    return T.sigmoid(fc(w * float(n)))


class PoseRegressor(T.Module):
    """feat = dropout(FC(pooled)); q = FC(feat) normalized, t = FC(feat)."""

    def __init__(self, c, rng, dropout=0.5):
        self.dropout = dropout
        self.fc_feat = T.FC(c, c, rng)
        self.fc_q = T.FC(c, 4, rng)
        self.fc_t = T.FC(c, 3, rng)
        # start near the identity transform
        for head in (self.fc_q, self.fc_t):
            head.params["0.weight"].data *= 0.1
            head.params["0.bias"].data[:] = 0.0
        self.fc_q.params["0.bias"].data[0] = 1.0

    def __call__(self, pooled, rng=None):
        feat = self.fc_feat(pooled)
        feat = T.dropout(feat, self.dropout, rng, training=self.training and rng is not None)
        return G.normalize_quat_t(self.fc_q(feat), QUAT_EPS), self.fc_t(feat)


class FlowInit(T.Module):
    def __init__(self, c_feat3, c, k_enc, k_up, k1, k2, k_local, rng):
        self.k_enc = k_enc
        self.down1 = T.MLP([3 + 2 * c, c, c], rng)
        self.down2 = T.MLP([3 + 2 * c, c, c], rng)
        self.up = SetUpConv(c, c, c, k_up, rng)
        self.fc_coarse = T.FC(c, 3, rng)
        self.occ_cv = OccPerceptionCostVolume(c_feat3, c, c, k1, k2, k_local, rng)
        self.mlp_ff = T.MLP([2 * c + 1, c, c], rng)
        self.fc_sf = T.FC(c, 3, rng)

    def __call__(self, pyr_p, pyr_q, cv_init):
        return flow_init(pyr_p, pyr_q, cv_init, self)


def flow_init(pyr_p, pyr_q, cv_init, params):
    """Coarse flow at level 3 from the level-2 cost volume.

    ``pyr_p``/``pyr_q`` are indexed by level (0 = input). ``cv_init`` lives on
    the level-2 points of P.
    """
    cv2 = set_conv(pyr_p[2].points, cv_init, pyr_p[3].parent_indices, params.k_enc, params.down1)
    cv3 = set_conv(pyr_p[3].points, cv2, pyr_p[4].parent_indices, params.k_enc, params.down2)
    cv4 = params.up(pyr_p[4].points, cv3, pyr_p[3].points, cv2)
    sf_coarse = params.fc_coarse(cv4)
    p_w = T.Tensor(pyr_p[3].points) + sf_coarse
    cv, occ, _ = params.occ_cv(p_w, pyr_p[3].features, pyr_q[3].points, pyr_q[3].features, cv2)
    ff = params.mlp_ff(T.concat([cv, cv4, occ], axis=-1))
    sf = sf_coarse + params.fc_sf(ff)
    return FlowState(sf=sf, occ=occ, ff=ff, sf_coarse=sf_coarse)


class PoseInit(T.Module):
    def __init__(self, c_feat4, c, k_enc, rng, dropout=0.5):
        self.k_enc = k_enc
        self.down1 = T.MLP([3 + 2 * c, c, c], rng)
        self.down2 = T.MLP([3 + 2 * c, c, c], rng)
        self.mlp_ef = T.MLP([c, c, c], rng)
        self.mlp_w = T.MLP([c + c_feat4, c, c], rng, activations=["relu", "none"])
        self.fc_mask = T.FC(c, 1, rng)
        self.regress = PoseRegressor(c, rng, dropout)

    def __call__(self, pyr_p, cv_init, rng=None):
        return pose_init(pyr_p, cv_init, self, rng)


def pose_init(pyr_p, cv_init, params, rng=None):
    """Coarse pose, static mask and embedding mask over the level-4 points."""
    cv2 = set_conv(pyr_p[2].points, cv_init, pyr_p[3].parent_indices, params.k_enc, params.down1)
    cv = set_conv(pyr_p[3].points, cv2, pyr_p[4].parent_indices, params.k_enc, params.down2)
    ef = params.mlp_ef(cv)
    w = point_softmax(params.mlp_w(T.concat([ef, pyr_p[4].features], axis=-1)))
    mask = static_mask(w, params.fc_mask)
    q, t = params.regress(masked_pool(w, cv), rng)
    return PoseState(q=q, t=t, mask=mask, w=w, ef=ef)
