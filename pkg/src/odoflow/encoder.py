"""Siamese feature pyramid and the set-conv / set-upconv layers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as G
from . import tensor as T


@dataclass
class PyramidConfig:
    n_input: int = 8192
    sizes: list = field(default_factory=lambda: [2048, 1024, 256, 64])
    widths: list = field(default_factory=lambda: [32, 64, 128, 256])
    k_enc: int = 16
    fps_seed: int = 0

    def __post_init__(self):
        if len(self.sizes) != len(self.widths):
            raise ValueError("one channel width per pyramid level")
        prev = self.n_input
        for s in self.sizes:
            if not 0 < s < prev:
                raise ValueError(f"pyramid sizes must strictly decrease from {self.n_input}: {self.sizes}")
            prev = s

    @classmethod
    def reduced(cls):
        return cls(n_input=512, sizes=[256, 128, 64, 32], widths=[16, 32, 64, 128])

    @classmethod
    def tiny(cls):
        return cls(n_input=32, sizes=[16, 12, 8, 4], widths=[8, 8, 16, 16], k_enc=4)


@dataclass
class PyramidLevel:
    points: np.ndarray          # B, N_l, 3
    features: T.Tensor          # B, N_l, C_l
    parent_indices: np.ndarray  # B, N_l, indices into the previous level


def set_conv(points_in, features_in, sampled_idx, k, mlp):
    """Max over K neighbours of MLP((p_k - p_i) ⊕ f_k ⊕ f_i) for each sampled point.

    ``points_in`` (B, N, 3) array, ``features_in`` (B, N, C) Tensor,
    ``sampled_idx`` (B, M) indices of the sampled points within ``points_in``.
    """
    points_in = np.asarray(points_in)
    features_in = T.as_tensor(features_in)
    c = features_in.shape[-1]
    if mlp.spec.n_in != 3 + 2 * c:
        raise ValueError(f"set_conv MLP expects input width {mlp.spec.n_in}, features give {3 + 2 * c}")
    if k > points_in.shape[1]:
        raise ValueError(f"K_enc={k} exceeds {points_in.shape[1]} input points")
    sampled_idx = np.asarray(sampled_idx)
    sampled = np.take_along_axis(points_in, sampled_idx[..., None], axis=1)
    nbr = G.batched_knn(sampled, points_in, k)                        # B, M, K
    rel = _gather_np(points_in, nbr) - sampled[:, :, None, :]
    f_i = T.reshape(T.gather(features_in, sampled_idx), (len(sampled_idx), sampled_idx.shape[1], 1, c))
    h = mlp.parts(rel, (features_in, nbr), f_i)                       # B, M, K, C_out
    return T.tmax(h, axis=2)


def _gather_np(a, idx):
    b = np.arange(a.shape[0]).reshape((-1,) + (1,) * (idx.ndim - 1))
    return a[b, idx]


class Encoder(T.Module):
    """Shared-weight pyramid; one set-conv MLP per level."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        widths = [3] + list(cfg.widths)
        self.layers = [T.MLP([3 + 2 * cin, cout, cout], rng) for cin, cout in zip(widths[:-1], widths[1:])]

    def __call__(self, pc):
        return build_pyramid(pc, self.cfg, self)


def build_pyramid(pc, cfg, encoder):
    """Levels 1..4 of the pyramid for a batch of clouds ``pc`` (B, 4N, 3).

    Level-0 features are the coordinates themselves.
    """
    pc = np.asarray(pc)
    if pc.ndim == 2:
        pc = pc[None]
    if pc.shape[1] != cfg.n_input:
        raise ValueError(f"expected {cfg.n_input} input points, got {pc.shape[1]}")
    points, feats = pc, T.Tensor(pc)
    levels = []
    seed = cfg.fps_seed     # index into the input; each FPS output starts with its seed
    for size, mlp in zip(cfg.sizes, encoder.layers):
        idx = G.batched_fps(points, size, seed)
        seed = 0
        feats = set_conv(points, feats, idx, cfg.k_enc, mlp)
        points = _gather_np(points, idx)
        levels.append(PyramidLevel(points, feats, idx))
    return levels


def set_upconv(coarse_points, coarse_features, fine_points, fine_features, k, mlp_agg, mlp_fuse):
    """Propagate coarse features to fine points.

    Per fine point: max over K coarse neighbours of MLP(rel ⊕ coarse feature),
    then fused with the fine point's own feature by a second MLP.
    """
    coarse_points, fine_points = np.asarray(coarse_points), np.asarray(fine_points)
    if fine_points.shape[1] < coarse_points.shape[1]:
        raise ValueError("set_upconv needs at least as many fine points as coarse points")
    if k > coarse_points.shape[1]:
        raise ValueError(f"K_up={k} exceeds {coarse_points.shape[1]} coarse points")
    nbr = G.batched_knn(fine_points, coarse_points, k)
    rel = _gather_np(coarse_points, nbr) - fine_points[:, :, None, :]
    h = mlp_agg.parts(rel, (T.as_tensor(coarse_features), nbr))
    agg = T.tmax(h, axis=2)
    if fine_features is not None:
        agg = T.concat([agg, fine_features], axis=-1)
    return mlp_fuse(agg)


class SetUpConv(T.Module):
    def __init__(self, c_coarse, c_fine, c_out, k, rng):
        self.k = k
        self.agg = T.MLP([3 + c_coarse, c_out], rng)
        self.fuse = T.MLP([c_out + c_fine, c_out], rng)

    def __call__(self, coarse_points, coarse_features, fine_points, fine_features):
        return set_upconv(coarse_points, coarse_features, fine_points, fine_features,
                          self.k, self.agg, self.fuse)
