"""Unsupervised flow losses, the supervised pose loss and their weighted totals.

Every per-sample loss is a sum over points; a leading batch axis, when
present, is averaged.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import geometry as G
from . import tensor as T

K_NEIGHBORS = 8


@dataclass
class LossWeights:
    alpha: tuple = (0.02, 0.04, 0.08, 0.16)   # per level 0..3
    sigma: tuple = (1.0, 1.0, 0.3)            # chamfer, smoothness, laplacian
    lam: tuple = (0.2, 0.4, 0.8, 1.6)         # pose loss per level 0..3
    mu: tuple = (1.0, 1.0)                    # flow, pose

    def __post_init__(self):
        self.alpha, self.sigma = tuple(self.alpha), tuple(self.sigma)
        self.lam, self.mu = tuple(self.lam), tuple(self.mu)
        if len(self.alpha) != 4 or len(self.lam) != 4 or len(self.sigma) != 3 or len(self.mu) != 2:
            raise ValueError("LossWeights needs 4 alpha, 3 sigma, 4 lam and 2 mu values")
        if min(self.alpha + self.sigma + self.lam + self.mu) < 0:
            raise ValueError("loss weights must be non-negative")

    def to_dict(self):
        return asdict(self)


class UncertaintyParams(T.Module):
    """Learnable log-scale weights on the translation and rotation terms."""

    def __init__(self, w_x=0.0, w_q=-2.5):
        self.w_x = T.Tensor(np.array(w_x), requires_grad=True, name="w_x")
        self.w_q = T.Tensor(np.array(w_q), requires_grad=True, name="w_q")


def _batched(x):
    x = T.as_tensor(x)
    return T.reshape(x, (1,) + x.shape) if x.ndim == 2 else x


def _batch_mean(per_sample):
    return T.tsum(per_sample) * (1.0 / per_sample.shape[0])


def chamfer_loss(P_w, Q):
    """Sum of squared nearest-neighbour distances in both directions."""
    P_w, Q = _batched(P_w), _batched(Q)
    if P_w.shape[1] == 0 or Q.shape[1] == 0:
        raise ValueError("chamfer_loss needs non-empty clouds")
    fwd = T.gather(Q, G.batched_knn(P_w.data, Q.data, 1))[:, :, 0, :] - P_w
    bwd = T.gather(P_w, G.batched_knn(Q.data, P_w.data, 1))[:, :, 0, :] - Q
    per = T.tsum(fwd * fwd, axis=(1, 2)) + T.tsum(bwd * bwd, axis=(1, 2))
    return _batch_mean(per)


def smoothness_loss(P, SF, k=K_NEIGHBORS):
    """Mean squared flow difference to the K nearest neighbours (self included), summed."""
    P, SF = np.asarray(P.data if isinstance(P, T.Tensor) else P), _batched(SF)
    if P.ndim == 2:
        P = P[None]
    if not 1 <= k <= P.shape[1]:
        raise ValueError(f"K={k} out of range for {P.shape[1]} points")
    idx = G.batched_knn(P, P, k)
    d = T.gather(SF, idx) - T.reshape(SF, SF.shape[:2] + (1, 3))
    per = T.tsum(d * d, axis=(1, 2, 3)) * (1.0 / k)
    return _batch_mean(per)


def self_exclusive_knn(points, k):
    """K nearest neighbours of each point in its own cloud, never the point itself."""
    pts = np.asarray(points)
    n = pts.shape[1]
    if not 1 <= k < n:
        raise ValueError(f"K={k} needs 1 <= K < {n}")
    idx = G.batched_knn(pts, pts, k + 1)
    own = np.arange(n)[None, :, None]
    hit = idx == own
    # drop the own index, or the farthest entry when duplicates displaced it
    drop = np.where(hit.any(-1), hit.argmax(-1), k)
    keep = np.ones(idx.shape, dtype=bool)
    np.put_along_axis(keep, drop[..., None], False, axis=-1)
    return idx[keep].reshape(idx.shape[0], n, k)


def laplacian_vectors(points, k=K_NEIGHBORS):
    """Mean offset of each point's K neighbours (B, N, 3); differentiable in ``points``."""
    pts = _batched(points)
    idx = self_exclusive_knn(pts.data, k)
    return T.mean(T.gather(pts, idx), axis=2) - pts


def laplacian_loss(P_w, Q, k=K_NEIGHBORS):
    """Squared difference of Laplacian vectors at P_w and interpolated from Q."""
    P_w, Q = _batched(P_w), _batched(Q)
    if not 1 <= k < min(P_w.shape[1], Q.shape[1]):
        raise ValueError(f"K={k} out of range for clouds of {P_w.shape[1]} and {Q.shape[1]} points")
    v_p = laplacian_vectors(P_w, k)
    with T.no_grad():
        v_q = laplacian_vectors(Q, k)
    v_inter = G.three_nn_interpolate(P_w, Q.data, v_q.data)
    d = v_p - v_inter
    return _batch_mean(T.tsum(d * d, axis=(1, 2)))


def flow_level_losses(P, SF, Q, k=K_NEIGHBORS, max_points=None, rng=None):
    """(chamfer, smoothness, laplacian) for one level.

    ``max_points`` caps the number of points of both clouds that enter the
    losses, drawn without replacement from ``rng``.
    """
    P = np.asarray(P.data if isinstance(P, T.Tensor) else P)
    Q = np.asarray(Q.data if isinstance(Q, T.Tensor) else Q)
    SF = T.as_tensor(SF)
    if P.ndim == 2:
        P, Q, SF = P[None], Q[None], T.reshape(SF, (1,) + SF.shape)
    if max_points is not None and P.shape[1] > max_points:
        rng = rng if rng is not None else np.random.default_rng(0)
        sel = rng.choice(P.shape[1], max_points, replace=False)
        P, SF = P[:, sel], T.getitem(SF, (slice(None), sel))
    if max_points is not None and Q.shape[1] > max_points:
        rng = rng if rng is not None else np.random.default_rng(0)
        Q = Q[:, rng.choice(Q.shape[1], max_points, replace=False)]
    P_w = T.Tensor(P) + SF
    return chamfer_loss(P_w, Q), smoothness_loss(P, SF, k), laplacian_loss(P_w, Q, k)


def combine_flow_losses(components, weights=None):
    """Sum over levels of alpha_l * (sigma . (l_C, l_S, l_L)); ``components[l]`` is level l."""
    weights = weights or LossWeights()
    if len(components) != 4:
        raise ValueError(f"expected 4 levels of flow losses, got {len(components)}")
    total = 0.0
    for a, comp in zip(weights.alpha, components):
        for s, c in zip(weights.sigma, comp):
            total = total + (a * s) * c
    return T.as_tensor(total)


def flow_loss_total(levels, weights=None, k=K_NEIGHBORS, max_points=None, rng=None):
    """Weighted flow loss; ``levels[l]`` = (P, SF, Q) at pyramid level l."""
    comps = [flow_level_losses(P, SF, Q, k, max_points, rng) for P, SF, Q in levels]
    return combine_flow_losses(comps, weights)


def canonical_quat(q):
    """Flip quaternions so that w >= 0."""
    q = np.asarray(q, dtype=np.float64)
    return np.where(q[..., :1] < 0, -q, q)


def pose_level_loss(q, t, q_gt, t_gt, unc):
    """Per-sample pose loss at one level, (B,)."""
    q, t = T.as_tensor(q), T.as_tensor(t)
    if q.ndim == 1:
        q, t = T.reshape(q, (1, 4)), T.reshape(t, (1, 3))
    q_gt = canonical_quat(np.atleast_2d(q_gt))
    t_gt = np.atleast_2d(np.asarray(t_gt, dtype=np.float64))
    if not np.allclose(np.linalg.norm(q_gt, axis=-1), 1.0, atol=1e-6):
        raise ValueError("ground-truth quaternion must be unit length")
    qn = q / T.sqrt(T.tsum(q * q, axis=-1, keepdims=True))
    # ±q encode the same rotation: align the prediction with the target
    sign = np.where(np.sum(qn.data * q_gt, axis=-1, keepdims=True) < 0, -1.0, 1.0)
    dq = T.Tensor(q_gt) - qn * sign
    l_t = T.tsum(T.absolute(T.Tensor(t_gt) - t), axis=-1)
    l_q = T.sqrt(T.tsum(dq * dq, axis=-1))
    return (l_t * T.exp(-unc.w_x) + unc.w_x) + (l_q * T.exp(-unc.w_q) + unc.w_q)


def pose_loss(preds, q_gt, t_gt, unc, weights=None):
    """Sum over levels of lam_l * pose loss; ``preds[l]`` = (q, t) at level l."""
    weights = weights or LossWeights()
    total = 0.0
    for lam, (q, t) in zip(weights.lam, preds):
        if lam:
            total = total + lam * _batch_mean(pose_level_loss(q, t, q_gt, t_gt, unc))
    return T.as_tensor(total)


def total_loss(l_sf, l_pose, weights=None):
    weights = weights or LossWeights()
    mu_sf, mu_p = weights.mu
    return mu_sf * T.as_tensor(l_sf) + mu_p * T.as_tensor(l_pose)
