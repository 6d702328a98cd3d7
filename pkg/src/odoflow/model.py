"""Full network: siamese pyramid, initial cost volume, init heads, refinement."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .costvolume import AttentiveCostVolume
from .encoder import Encoder, PyramidConfig, PyramidLevel
from .init_heads import FlowInit, PoseInit
from .refinement import H_MODES, RESIDUAL_BASES, RefineLevel, refine_all


@dataclass
class NetConfig:
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    channels: int = 64
    k1: int = 16
    k2: int = 8
    k_local: int = 8
    k_up: int = 8
    dropout: float = 0.5
    h_mode: str = "literal"
    residual_base: str = "upsampled"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.pyramid, dict):
            self.pyramid = PyramidConfig(**self.pyramid)
        if self.h_mode not in H_MODES:
            raise ValueError(f"h_mode must be one of {H_MODES}")
        if self.residual_base not in RESIDUAL_BASES:
            raise ValueError(f"residual_base must be one of {RESIDUAL_BASES}")

    @classmethod
    def full(cls, **kw):
        return cls(**kw)

    @classmethod
    def reduced(cls, **kw):
        kw.setdefault("channels", 32)
        return cls(pyramid=PyramidConfig.reduced(), **kw)

    @classmethod
    def tiny(cls, **kw):
        """32-point network for finite-difference checks and smoke tests."""
        for key, val in (("channels", 8), ("k1", 4), ("k2", 4), ("k_local", 4), ("k_up", 3)):
            kw.setdefault(key, val)
        return cls(pyramid=PyramidConfig.tiny(), **kw)

    @classmethod
    def preset(cls, name, **kw):
        if name == "full":
            return cls.full(**kw)
        if name == "reduced":
            return cls.reduced(**kw)
        if name == "tiny":
            return cls.tiny(**kw)
        raise ValueError(f"unknown preset {name!r}")

    def to_dict(self):
        return asdict(self)


# parameter groups used for staged training
SHARED, FLOW, POSE = "shared", "flow", "pose"


class SceneFlowNet(T.Module):
    def __init__(self, cfg=None):
        self.cfg = cfg = cfg or NetConfig()
        rng = np.random.default_rng(cfg.seed)
        pc, c = cfg.pyramid, cfg.channels
        feat = [3] + list(pc.widths)       # feature width per level, level 0 = xyz
        self.encoder = Encoder(pc, rng)
        self.cv_init = AttentiveCostVolume(feat[2], c, cfg.k1, cfg.k2, rng)
        self.flow_init = FlowInit(feat[3], c, pc.k_enc, cfg.k_up, cfg.k1, cfg.k2, cfg.k_local, rng)
        self.pose_init = PoseInit(feat[4], c, pc.k_enc, rng, cfg.dropout)
        self.refine = [RefineLevel(feat[l], c, cfg.k1, cfg.k2, cfg.k_local, cfg.k_up, rng, cfg.dropout)
                       for l in (2, 1, 0)]

    def param_group(self, name):
        """Which training group a parameter belongs to (shared / flow / pose)."""
        head = name.split(".")[0]
        if head in ("encoder", "cv_init"):
            return SHARED
        if head == "flow_init":
            return FLOW
        if head == "pose_init":
            return POSE
        part = name.split(".")[2]
        if part in ("occ_cv",):
            return SHARED
        if part in ("flow", "up_ff"):
            return FLOW
        return POSE

    def pyramids(self, P, Q):
        """Encode both frames with shared weights; returns per-level lists (0 = input)."""
        P, Q = np.asarray(P), np.asarray(Q)
        if P.ndim == 2:
            P, Q = P[None], Q[None]
        B = len(P)
        both = self.encoder(np.concatenate([P, Q], axis=0))
        pyr_p = [PyramidLevel(P, T.Tensor(P), None)]
        pyr_q = [PyramidLevel(Q, T.Tensor(Q), None)]
        for lvl in both:
            pyr_p.append(PyramidLevel(lvl.points[:B], lvl.features[:B], lvl.parent_indices[:B]))
            pyr_q.append(PyramidLevel(lvl.points[B:], lvl.features[B:], lvl.parent_indices[B:]))
        return pyr_p, pyr_q

    def __call__(self, P, Q, rng=None):
        """Forward pass; returns (estimates for levels 3..0, pyr_p, pyr_q).

        ``rng`` drives dropout while in training mode.
        """
        pyr_p, pyr_q = self.pyramids(P, Q)
        cv = self.cv_init(pyr_p[2].points, pyr_p[2].features, pyr_q[2].points, pyr_q[2].features)
        flow = self.flow_init(pyr_p, pyr_q, cv)
        pose = self.pose_init(pyr_p, cv, rng)
        est = refine_all(flow, pose, pyr_p, pyr_q, self.refine, self.cfg.h_mode,
                         self.cfg.residual_base, rng)
        return est, pyr_p, pyr_q
