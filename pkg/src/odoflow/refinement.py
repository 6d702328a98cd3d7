"""Coarse-to-fine pose and flow refinement with the mask-weighted warp."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as G
from . import tensor as T
from .costvolume import OccPerceptionCostVolume
from .encoder import SetUpConv
from .init_heads import PoseRegressor, masked_pool, point_softmax, static_mask

RANGE_TOL = 1e-5     # float32 upsampling can overshoot by an ulp
H_MODES = ("literal", "inverted", "softmax")
RESIDUAL_BASES = ("upsampled", "blended")


@dataclass
class LevelEstimate:
    level: int
    points: np.ndarray        # flow-side points (B, N, 3)
    pose_points: np.ndarray   # points carrying M / W / EF
    sf: T.Tensor
    q: T.Tensor
    t: T.Tensor
    mask: T.Tensor            # static mask M
    occ: T.Tensor             # occlusion mask O (visible probability)
    w: T.Tensor
    ef: T.Tensor
    ff: T.Tensor
    h: T.Tensor = None
    p_warp: T.Tensor = None
    mask_up: T.Tensor = None  # M carried into this level's warp


@dataclass
class Upsampled:
    sf: T.Tensor
    mask: T.Tensor
    occ: T.Tensor
    w: T.Tensor
    ef: T.Tensor
    ff: T.Tensor


def upsample_estimates(prev, fine_points, fine_features, params):
    """Three-NN interpolation for SF, M, O; set-upconv for W, EF, FF."""
    fp = np.asarray(fine_points)
    return Upsampled(
        sf=G.three_nn_interpolate(fp, prev.points, prev.sf),
        mask=G.three_nn_interpolate(fp, prev.pose_points, prev.mask),
        occ=G.three_nn_interpolate(fp, prev.points, prev.occ),
        w=params.up_w(prev.pose_points, prev.w, fp, fine_features),
        ef=params.up_ef(prev.pose_points, prev.ef, fp, fine_features),
        ff=params.up_ff(prev.points, prev.ff, fp, fine_features),
    )


def warp_weight(mask, occ, mode="literal"):
    """Per-point weight of the pose warp.

    literal: clamp(M * (1 - O), 0, 1); inverted: M * O;
    softmax: softmax over points of M * (1 - O).
    """
    if mode == "literal":
        return T.clamp(mask * (1.0 - occ), 0.0, 1.0)
    if mode == "inverted":
        return mask * occ
    if mode == "softmax":
        return T.softmax(mask * (1.0 - occ), axis=1)
    raise ValueError(f"unknown warp weight mode {mode!r}; expected one of {H_MODES}")


def warp_layer(points, sf_up, q, t, mask, occ, mode="literal", h=None):
    """Blend of pose warp and flow warp; returns (P_warp, H).

    ``h`` overrides the mask-derived weight when given.
    """
    for name, m in (("static mask", mask), ("occlusion mask", occ)):
        d = T.as_tensor(m).data
        if d.size and (d.min() < -RANGE_TOL or d.max() > 1.0 + RANGE_TOL):
            raise ValueError(f"{name} outside [0, 1]: range [{d.min()}, {d.max()}]")
    p = T.as_tensor(points)
    p_pose = G.pose_apply_t(q, t, p)
    p_sf = p + sf_up
    if h is None:
        h = warp_weight(T.as_tensor(mask), T.as_tensor(occ), mode)
    return T.lerp(p_sf, p_pose, h), h


def compose_pose(q_prev, t_prev, dq, dt):
    """q = q_prev * dq and t = dq t_prev dq^-1 + dt."""
    return G.quat_multiply_t(q_prev, dq), G.rotate_t(dq, T.reshape(t_prev, (t_prev.shape[0], 1, 3)))[:, 0, :] + dt


class PoseRefiner(T.Module):
    def __init__(self, c_feat, c, rng, dropout=0.5):
        self.mlp_ef = T.MLP([2 * c + c_feat, c, c], rng)
        self.mlp_w = T.MLP([1 + 2 * c + c_feat, c, c], rng, activations=["relu", "none"])
        self.fc_mask = T.FC(c, 1, rng)
        self.regress = PoseRegressor(c, rng, dropout)


def pose_refine_level(ef_up, mask_up, w_up, cv_self, features, q_prev, t_prev, params, rng=None):
    """Residual pose at one level composed onto the previous estimate.

    Returns (q, t, M, W, EF).
    """
    ef = params.mlp_ef(T.concat([ef_up, cv_self, features], axis=-1))
    w = point_softmax(params.mlp_w(T.concat([mask_up, w_up, ef, features], axis=-1)))
    mask = static_mask(w, params.fc_mask)
    dq, dt = params.regress(masked_pool(w, ef), rng)
    q, t = compose_pose(q_prev, t_prev, dq, dt)
    return q, t, mask, w, ef


class FlowPredictor(T.Module):
    def __init__(self, c_feat, c, rng):
        self.mlp_ff = T.MLP([c_feat + 2 * c + 1, c, c], rng)
        self.fc_sf = T.FC(c, 3, rng)


def flow_predictor(features, ff_up, cv_o, occ, sf_up, params):
    """FF = MLP(F ⊕ FF_up ⊕ CV_o ⊕ O); SF = FC(FF) + SF_up. Returns (SF, FF)."""
    ff = params.mlp_ff(T.concat([features, ff_up, cv_o, occ], axis=-1))
    return params.fc_sf(ff) + sf_up, ff


class RefineLevel(T.Module):
    """All learned pieces of one refinement level."""

    def __init__(self, c_feat, c, k1, k2, k_local, k_up, rng, dropout=0.5):
        self.up_w = SetUpConv(c, c_feat, c, k_up, rng)
        self.up_ef = SetUpConv(c, c_feat, c, k_up, rng)
        self.up_ff = SetUpConv(c, c_feat, c, k_up, rng)
        self.occ_cv = OccPerceptionCostVolume(c_feat, c, c, k1, k2, k_local, rng)
        self.pose = PoseRefiner(c_feat, c, rng, dropout)
        self.flow = FlowPredictor(c_feat, c, rng)


def refine_level(prev, level, pyr_p, pyr_q, params, h_mode="literal", residual_base="upsampled", rng=None):
    fine = pyr_p[level]
    up = upsample_estimates(prev, fine.points, fine.features, params)
    p_warp, h = warp_layer(fine.points, up.sf, prev.q, prev.t, up.mask, up.occ, h_mode)
    cv_o, occ, cv_self = params.occ_cv(p_warp, fine.features, pyr_q[level].points,
                                       pyr_q[level].features, up.ff)
    q, t, mask, w, ef = pose_refine_level(up.ef, up.mask, up.w, cv_self, fine.features,
                                          prev.q, prev.t, params.pose, rng)
    if residual_base == "upsampled":
        base = up.sf
    elif residual_base == "blended":
        base = p_warp - T.Tensor(fine.points)
    else:
        raise ValueError(f"unknown residual base {residual_base!r}; expected one of {RESIDUAL_BASES}")
    sf, ff = flow_predictor(fine.features, up.ff, cv_o, occ, base, params.flow)
    return LevelEstimate(level, fine.points, fine.points, sf, q, t, mask, occ, w, ef, ff, h, p_warp, up.mask)


def refine_all(init_flow, init_pose, pyr_p, pyr_q, levels, h_mode="literal",
               residual_base="upsampled", rng=None):
    """Estimates for levels 3, 2, 1, 0 (coarse to fine).

    ``levels`` holds the :class:`RefineLevel` modules for levels 2, 1, 0.
    """
    est = LevelEstimate(3, pyr_p[3].points, pyr_p[4].points, init_flow.sf, init_pose.q, init_pose.t,
                        init_pose.mask, init_flow.occ, init_pose.w, init_pose.ef, init_flow.ff)
    out = [est]
    for level, params in zip((2, 1, 0), levels):
        est = refine_level(est, level, pyr_p, pyr_q, params, h_mode, residual_base, rng)
        out.append(est)
    return out
