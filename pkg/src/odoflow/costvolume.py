"""Attentive cost volume and the occlusion-aware blend built on it."""

from __future__ import annotations

import numpy as np

from . import geometry as G
from . import tensor as T

POS_WIDTH = 10  # p ⊕ q ⊕ (q - p) ⊕ |q - p|^2


def _data(x):
    return x.data if isinstance(x, T.Tensor) else np.asarray(x)


def position_encoding(p, nb):
    """``p`` (B, N, 3), ``nb`` (B, N, K, 3) -> (B, N, K, 10)."""
    p4 = T.reshape(p, p.shape[:2] + (1, 3))
    d = nb - p4
    return T.concat([p4, nb, d, T.tsum(d * d, axis=-1, keepdims=True)], axis=-1)


class AttentiveCostVolume(T.Module):
    """Cross-frame attention over K1 neighbours in Q, then self-aggregation over K2 in P.

    ``n_layers`` sets the depth of the matching MLP; the two attention MLPs
    use one layer fewer (at least one).
    """

    def __init__(self, c_feat, c_out, k1, k2, rng, n_layers=3):
        self.k1, self.k2 = k1, k2
        att = max(1, n_layers - 1)
        self.match = T.MLP([POS_WIDTH + 2 * c_feat] + [c_out] * n_layers, rng)
        self.att_q2p = T.MLP([POS_WIDTH + c_out] + [c_out] * att, rng,
                             activations=["relu"] * (att - 1) + ["none"])
        self.att_p2p = T.MLP([POS_WIDTH + c_out] + [c_out] * att, rng,
                             activations=["relu"] * (att - 1) + ["none"])
        self.last_weights = None

    def __call__(self, P, F_P, Q, F_Q, neighbors=None):
        return attentive_cost_volume(P, F_P, Q, F_Q, self.k1, self.k2, self, neighbors)


def attentive_cost_volume(P, F_P, Q, F_Q, k1, k2, params, neighbors=None):
    """Per-point matching feature of P against Q (B, N, C_out).

    ``params`` is an :class:`AttentiveCostVolume` providing the three MLPs.
    ``neighbors`` optionally supplies precomputed (P->Q K1-NN, P->P K2-NN)
    indices. The softmax weights of both stages are left on
    ``params.last_weights``.
    """
    P, Q, F_P, F_Q = T.as_tensor(P), T.as_tensor(Q), T.as_tensor(F_P), T.as_tensor(F_Q)
    if F_P.shape[-1] != F_Q.shape[-1]:
        raise ValueError(f"feature widths differ: {F_P.shape[-1]} vs {F_Q.shape[-1]}")
    if not 1 <= k1 <= Q.shape[1]:
        raise ValueError(f"K1={k1} out of range for {Q.shape[1]} points in Q")
    if not 1 <= k2 <= P.shape[1]:
        raise ValueError(f"K2={k2} out of range for {P.shape[1]} points in P")
    B, N, c = F_P.shape
    idx_q, idx_p = neighbors if neighbors is not None else (None, None)
    if idx_q is None:
        idx_q = G.batched_knn(P.data, Q.data, k1)
    pos = position_encoding(P, T.gather(Q, idx_q))
    # MLP(pos ⊕ f_p ⊕ f_q), first layer split per part
    f_q2p = params.match.parts(pos, T.reshape(F_P, (B, N, 1, c)), (F_Q, idx_q))
    w_q2p = T.softmax(params.att_q2p.parts(pos, f_q2p), axis=2)
    cost = T.tsum(f_q2p * w_q2p, axis=2)

    if idx_p is None:
        idx_p = G.batched_knn(P.data, P.data, k2)
    pos2 = position_encoding(P, T.gather(P, idx_p))
    cost_k = T.gather(cost, idx_p)
    w_p2p = T.softmax(params.att_p2p.parts(pos2, cost_k), axis=2)
    params.last_weights = (w_q2p.data, w_p2p.data)
    return T.tsum(cost_k * w_p2p, axis=2)


def occlusion_head(f_o, fc):
    """Probability that each point is visible in the second frame (B, N, 1)."""
    return T.sigmoid(fc(f_o))


def self_inclusive_knn(points, k):
    """kNN within one cloud, guaranteeing each point is in its own neighbourhood."""
    return _include_self(G.batched_knn(points, points, k))


def _include_self(idx):
    """Put each point's own index in the last slot when duplicates pushed it out."""
    idx = idx.copy()
    own = np.arange(idx.shape[1])[None, :]
    missing = ~(idx == own[..., None]).any(axis=-1)
    if missing.any():
        idx[..., -1] = np.where(missing, own, idx[..., -1])
    return idx


def occlusion_blend(cv_self, occ, points, k, neighbors=None):
    """O * CV_self + (1 - O) * max of CV_self over the K-neighbourhood."""
    cv_self, occ = T.as_tensor(cv_self), T.as_tensor(occ)
    pts = _data(points)
    if occ.shape[:2] != cv_self.shape[:2] or pts.shape[:2] != cv_self.shape[:2]:
        raise ValueError(f"shape mismatch: cv {cv_self.shape}, mask {occ.shape}, points {pts.shape}")
    if not 1 <= k <= pts.shape[1]:
        raise ValueError(f"K={k} out of range for {pts.shape[1]} points")
    if neighbors is None:
        neighbors = self_inclusive_knn(pts, k)
    cv_local = T.tmax(T.gather(cv_self, neighbors), axis=2)
    return T.lerp(cv_local, cv_self, occ), cv_local


class OccPerceptionCostVolume(T.Module):
    """Two attentive cost volumes of different depth plus the occlusion blend.

    The deeper one gives CV_self. The shallower one, concatenated with the
    prior cost feature, feeds the occlusion head.
    """

    def __init__(self, c_feat, c_cv, c_prior, k1, k2, k_local, rng, self_layers=3, occ_layers=2):
        self.k_local = k_local
        self.acv_self = AttentiveCostVolume(c_feat, c_cv, k1, k2, rng, n_layers=self_layers)
        self.acv_occ = AttentiveCostVolume(c_feat, c_cv, k1, k2, rng, n_layers=occ_layers)
        self.fc_occ = T.FC(c_cv + c_prior, 1, rng)

    def occlusion_features(self, P_w, F_P, Q, F_Q, prior, neighbors=None):
        g = self.acv_occ(P_w, F_P, Q, F_Q, neighbors)
        return g if prior is None else T.concat([g, prior], axis=-1)

    def __call__(self, P_w, F_P, Q, F_Q, prior):
        return occ_perception_cost_volume(P_w, F_P, Q, F_Q, prior, self)


def occ_perception_cost_volume(P_w, F_P, Q, F_Q, prior_cv, params):
    """Returns (CV_o, O, CV_self)."""
    pts, q = _data(P_w), _data(Q)
    k1, k2 = params.acv_self.k1, params.acv_self.k2
    kmax = max(k2, params.k_local)
    # one neighbourhood search serves both cost volumes and the blend
    own = G.batched_knn(pts, pts, min(max(k2, params.k_local), pts.shape[1]))
    nb = (G.batched_knn(pts, q, k1), own[..., :k2] if k2 <= own.shape[-1] else None)
    cv_self = params.acv_self(P_w, F_P, Q, F_Q, nb)
    occ = occlusion_head(params.occlusion_features(P_w, F_P, Q, F_Q, prior_cv, nb), params.fc_occ)
    local = _include_self(own[..., :params.k_local]) if params.k_local <= own.shape[-1] else None
    cv_o, _ = occlusion_blend(cv_self, occ, pts, params.k_local, local)
    return cv_o, occ, cv_self
