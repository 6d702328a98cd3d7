"""Adam, the learning-rate schedule, staged training, evaluation and export."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import geometry as G
from . import losses as L
from . import metrics as MT
from . import tensor as T
from .model import FLOW, POSE, SHARED, NetConfig, SceneFlowNet

log = logging.getLogger(__name__)

STAGES = ("pose_only", "flow_only", "joint")
# trainable groups and whether each loss is active, per stage
STAGE_SETUP = {
    "pose_only": ({SHARED, POSE}, False, True),
    "flow_only": ({SHARED, FLOW}, True, False),
    "joint": ({SHARED, FLOW, POSE}, True, True),
}


@dataclass
class TrainConfig:
    lr: float = 0.001
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    decay_every: int = 13
    decay_rate: float = 0.7
    batch: int = 8
    stages: dict = field(default_factory=lambda: {"pose_only": 20, "flow_only": 20, "joint": 20})
    loss_weights: L.LossWeights = field(default_factory=L.LossWeights)
    preset: str = "reduced"
    seed: int = 0
    max_iters: int = None          # cap on total iterations across stages
    clip_norm: float = 5.0
    converge_window: int = 5       # epochs; 0 disables early stopping
    converge_tol: float = 0.01
    eval_every: int = 0            # epochs between held-out evaluations; 0 = never
    dtype: str = "float32"
    net: dict = field(default_factory=dict)   # NetConfig overrides
    w_x: float = 0.0
    w_q: float = -2.5
    loss_k: int = L.K_NEIGHBORS    # smoothness / Laplacian neighbourhood size

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = L.LossWeights(**self.loss_weights)
        self.betas = tuple(self.betas)
        if self.lr <= 0 or self.batch <= 0:
            raise ValueError("lr and batch must be positive")
        if not 0 < self.decay_rate <= 1:
            raise ValueError(f"decay_rate must lie in (0, 1], got {self.decay_rate}")
        if self.decay_every <= 0:
            raise ValueError("decay_every must be positive")
        unknown = set(self.stages) - set(STAGES)
        if unknown:
            raise ValueError(f"unknown stages {sorted(unknown)}; expected {STAGES}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def net_config(self):
        return NetConfig.preset(self.preset, **self.net)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def lr_at(epoch, cfg=None):
    cfg = cfg or TrainConfig()
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.lr * cfg.decay_rate ** (epoch // cfg.decay_every)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: dict = field(default_factory=dict)   # per-parameter step counts


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """In-place Adam update with bias correction for every name in ``grads``."""
    for name, g in grads.items():
        g = np.asarray(g)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    b1, b2 = betas
    for name, g in grads.items():
        p = params[name]
        if np.shape(g) != np.shape(p):
            raise ValueError(f"{name}: gradient shape {np.shape(g)} != parameter shape {np.shape(p)}")
        m = state.m.get(name)
        m = np.zeros_like(p) if m is None else m
        v = state.v.get(name)
        v = np.zeros_like(p) if v is None else v
        k = state.step.get(name, 0) + 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** k)
        v_hat = v / (1 - b2 ** k)
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        state.m[name], state.v[name], state.step[name] = m, v, k
    return params, state


def clip_by_global_norm(grads, max_norm):
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    params: dict
    config: dict
    adam: AdamState = field(default_factory=AdamState)
    epoch: int = 0
    stage: str = ""
    iteration: int = 0

    @property
    def config_hash(self):
        return TrainConfig.from_dict(self.config).hash()

    @property
    def w_x(self):
        return float(self.params["unc.w_x"])

    @property
    def w_q(self):
        return float(self.params["unc.w_q"])


def save_checkpoint(path, ckpt: Checkpoint):
    arrays = {f"param/{k}": v for k, v in ckpt.params.items()}
    for name in ckpt.adam.m:
        arrays[f"adam_m/{name}"] = ckpt.adam.m[name]
        arrays[f"adam_v/{name}"] = ckpt.adam.v[name]
    meta = {"config": ckpt.config, "config_hash": ckpt.config_hash, "epoch": ckpt.epoch,
            "stage": ckpt.stage, "iteration": ckpt.iteration, "adam_step": ckpt.adam.step}
    T.save_arrays(path, arrays, meta)


def load_checkpoint(path):
    arrays, meta = T.load_arrays(path)
    pick = lambda prefix: {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    ckpt = Checkpoint(params=pick("param/"), config=meta["config"],
                      adam=AdamState(pick("adam_m/"), pick("adam_v/"), dict(meta.get("adam_step", {}))),
                      epoch=meta.get("epoch", 0), stage=meta.get("stage", ""),
                      iteration=meta.get("iteration", 0))
    if "config_hash" in meta and meta["config_hash"] != ckpt.config_hash:
        raise ValueError(f"{path}: config hash mismatch, the file may be corrupted")
    return ckpt


class TrainState(T.Module):
    """The network plus the learnable pose-loss weights."""

    def __init__(self, cfg: TrainConfig):
        dtype = np.dtype(cfg.dtype)
        with T.default_dtype(dtype):
            self.net = SceneFlowNet(cfg.net_config())
            self.unc = L.UncertaintyParams(cfg.w_x, cfg.w_q)
        self.astype(dtype)

    def group(self, name):
        if name.startswith("unc."):
            return POSE
        return self.net.param_group(name[len("net."):])


def build_state(ckpt: Checkpoint):
    cfg = TrainConfig.from_dict(ckpt.config)
    state = TrainState(cfg)
    state.load_state_dict(ckpt.params)
    return cfg, state


def _snapshot(state, cfg, adam, epoch=0, stage="", iteration=0):
    adam = AdamState({k: v.copy() for k, v in adam.m.items()}, {k: v.copy() for k, v in adam.v.items()},
                     dict(adam.step))
    return Checkpoint(params={k: v.copy() for k, v in state.state_dict().items()},
                      config=json.loads(json.dumps(cfg.to_dict())), adam=adam, epoch=epoch, stage=stage, iteration=iteration)


# ---------------------------------------------------------------- forward + loss


def _levels_for_loss(est, pyr_p, pyr_q):
    """(P, SF, Q) and (q, t) ordered by level 0..3."""
    by_level = sorted(est, key=lambda e: e.level)
    flow = [(pyr_p[e.level].points, e.sf, pyr_q[e.level].points) for e in by_level]
    pose = [(e.q, e.t) for e in by_level]
    return flow, pose


def batch_loss(state, batch, weights, use_flow=True, use_pose=True, rng=None, k=L.K_NEIGHBORS):
    """Forward pass and weighted loss for one stacked batch; returns (loss, parts)."""
    est, pyr_p, pyr_q = state.net(batch["P"], batch["Q"], rng)
    flow_levels, pose_levels = _levels_for_loss(est, pyr_p, pyr_q)
    zero = T.Tensor(np.zeros(()))
    l_sf = L.flow_loss_total(flow_levels, weights, k) if use_flow else zero
    if use_pose:
        if "q" not in batch:
            raise ValueError("pose loss requested but the batch carries no pose ground truth")
        l_pose = L.pose_loss(pose_levels, batch["q"], batch["t"], state.unc, weights)
    else:
        l_pose = zero
    mu_sf, mu_p = weights.mu
    w = L.LossWeights(weights.alpha, weights.sigma, weights.lam,
                      (mu_sf if use_flow else 0.0, mu_p if use_pose else 0.0))
    total = L.total_loss(l_sf, l_pose, w)
    return total, {"flow": float(l_sf.data), "pose": float(l_pose.data), "est": est}


# ---------------------------------------------------------------- training


def _batches(n, batch, rng):
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def _stage_converged(history, window, tol):
    if window <= 0 or len(history) <= window:
        return False
    before, recent = min(history[:-window]), min(history[-window:])
    return (before - recent) < tol * abs(before)


def train(pairs, cfg: TrainConfig, val_pairs=None, checkpoint_dir=None, callback=None, init=None):
    """Three-stage training; returns (final checkpoint, per-epoch log).

    ``init`` optionally resumes from a checkpoint's parameters.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("training needs at least one pair")
    n_in = cfg.net_config().pyramid.n_input
    batch_all = D.stack_batch(pairs, n_in, seed=cfg.seed)
    state = TrainState(cfg)
    if init is not None:
        state.load_state_dict(init.params)
    state.train()
    adam = AdamState()
    rng = np.random.default_rng(cfg.seed)
    named = dict(state.named_parameters())
    groups = {k: state.group(k) for k in named}
    history, iteration, t0 = [], 0, time.time()
    ckpt = _snapshot(state, cfg, adam)

    with T.default_dtype(np.dtype(cfg.dtype)):
        for stage in STAGES:
            n_epochs = cfg.stages.get(stage, 0)
            if not n_epochs:
                continue
            active, use_flow, use_pose = STAGE_SETUP[stage]
            if use_pose and "q" not in batch_all:
                raise ValueError(f"stage {stage!r} needs pose ground truth for every training pair")
            for k, p in named.items():
                p.requires_grad = groups[k] in active
            trainable = {k: p for k, p in named.items() if p.requires_grad}
            stage_losses = []
            for epoch in range(n_epochs):
                if cfg.max_iters is not None and iteration >= cfg.max_iters:
                    break
                lr = lr_at(epoch, cfg)
                losses = []
                for idx in _batches(len(pairs), cfg.batch, rng):
                    if cfg.max_iters is not None and iteration >= cfg.max_iters:
                        break
                    batch = {k: v[idx] for k, v in batch_all.items()}
                    for p in trainable.values():
                        p.grad = None
                    loss, parts = batch_loss(state, batch, cfg.loss_weights, use_flow, use_pose, rng,
                                             cfg.loss_k)
                    T.backward(loss)
                    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                             for k, p in trainable.items()}
                    grads, gnorm = clip_by_global_norm(grads, cfg.clip_norm)
                    adam_step({k: p.data for k, p in trainable.items()}, grads, adam, lr, cfg.betas, cfg.eps)
                    losses.append(float(loss.data))
                    iteration += 1
                if not losses:
                    break
                entry = {"stage": stage, "epoch": epoch, "iteration": iteration, "lr": lr,
                         "loss": float(np.mean(losses)), "time": time.time() - t0}
                if val_pairs and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
                    state.eval()
                    entry["val"] = _metrics_dict(evaluate_state(state, cfg, val_pairs))
                    state.train()
                history.append(entry)
                stage_losses.append(entry["loss"])
                log.info("%s epoch %d it %d loss %.5f lr %.2e", stage, epoch, iteration, entry["loss"], lr)
                if callback:
                    callback(entry)
                if _stage_converged(stage_losses, cfg.converge_window, cfg.converge_tol):
                    log.info("%s converged after %d epochs", stage, epoch + 1)
                    break
            ckpt = _snapshot(state, cfg, adam, epoch=len(stage_losses), stage=stage, iteration=iteration)
            if checkpoint_dir:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                save_checkpoint(Path(checkpoint_dir) / f"{stage}.npz", ckpt)
    for p in named.values():
        p.requires_grad = True
    return ckpt, history


# ---------------------------------------------------------------- evaluation / inference


def predict(state, cfg, pairs, batch=None):
    """Level-0 outputs for every pair, in eval mode without gradients."""
    n_in = cfg.net_config().pyramid.n_input
    for i, pr in enumerate(pairs):
        if len(pr.P) != n_in:
            raise ValueError(f"pair {pr.name or i}: {len(pr.P)} points but the network expects {n_in}")
    state.eval()
    out = {"flow": [], "q": [], "t": [], "mask": [], "occ": []}
    batch = batch or cfg.batch
    with T.no_grad(), T.default_dtype(np.dtype(cfg.dtype)):
        for s in range(0, len(pairs), batch):
            b = D.stack_batch(pairs[s:s + batch], n_in, seed=cfg.seed + s)
            est, _, _ = state.net(b["P"], b["Q"], None)
            fin = est[-1]
            out["flow"].append(fin.sf.data.astype(np.float64))
            out["q"].append(fin.q.data.astype(np.float64))
            out["t"].append(fin.t.data.astype(np.float64))
            # the finest level's own M feeds no later warp; report the one its warp used
            out["mask"].append(fin.mask_up.data[..., 0].astype(np.float64))
            out["occ"].append(fin.occ.data[..., 0].astype(np.float64))
    return {k: np.concatenate(v) for k, v in out.items()}


def metrics_from_predictions(pred, pairs):
    res = {}
    if all(p.gt_flow is not None for p in pairs):
        res["flow"] = MT.flow_metrics(pred["flow"], np.stack([p.gt_flow for p in pairs]))
    if all(p.gt_pose is not None for p in pairs):
        res["pose"] = MT.pose_metrics(pred["q"], pred["t"], np.stack([p.gt_pose.q for p in pairs]),
                                      np.stack([p.gt_pose.t for p in pairs]))
    if all(p.dyn_labels is not None for p in pairs):
        dyn = np.stack([p.dyn_labels for p in pairs])
        if 0 < dyn.sum() < dyn.size:
            res["mask"] = MT.mask_metrics(pred["mask"], dyn)
    return res


def evaluate_state(state, cfg, pairs):
    return metrics_from_predictions(predict(state, cfg, pairs), pairs)


def evaluate(ckpt: Checkpoint, pairs):
    """Metrics of a checkpoint on labelled pairs (dropout disabled)."""
    cfg, state = build_state(ckpt)
    return evaluate_state(state, cfg, list(pairs))


def _metrics_dict(res):
    return {k: (v.to_dict() if hasattr(v, "to_dict") else v) for k, v in res.items()}


CORRECT_RGB, WRONG_RGB, PLAIN_RGB = (0, 0, 255), (255, 0, 0), (160, 160, 160)


def infer(ckpt: Checkpoint, pair: D.FramePair, out_dir):
    """Write the warped cloud (PLY) and pose, flow and masks (JSON) for one pair."""
    cfg, state = build_state(ckpt)
    pred = predict(state, cfg, [pair], batch=1)
    flow, q, t = pred["flow"][0], pred["q"][0], pred["t"][0]
    q = q / np.linalg.norm(q)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    warped = pair.P + flow
    if pair.gt_flow is not None:
        e, r = MT.flow_errors(flow, pair.gt_flow)
        colors = np.where(((e < 0.1) | (r < 0.1))[:, None], CORRECT_RGB, WRONG_RGB)
    else:
        colors = np.tile(PLAIN_RGB, (len(warped), 1))
    extra = {"flow_x": flow[:, 0], "flow_y": flow[:, 1], "flow_z": flow[:, 2],
             "static_mask": pred["mask"][0], "occlusion": pred["occ"][0]}
    ply = out / "warped.ply"
    js = out / "prediction.json"
    record = {"pose": {"q": q.tolist(), "t": t.tolist()}, "flow": flow.tolist(),
              "static_mask": pred["mask"][0].tolist(), "occlusion": pred["occ"][0].tolist(),
              "name": pair.name}
    try:
        G.write_ply(ply, warped, colors=colors, extra=extra)
        js.write_text(json.dumps(record))
    except OSError as exc:
        raise OSError(f"failed writing prediction to {out}: {exc}") from exc
    return {"ply": str(ply), "json": str(js), "flow": flow, "q": q, "t": t,
            "static_mask": pred["mask"][0], "occlusion": pred["occ"][0]}


def load_prediction(path):
    rec = json.loads(Path(path).read_text())
    return {"q": np.array(rec["pose"]["q"]), "t": np.array(rec["pose"]["t"]), "flow": np.array(rec["flow"]),
            "static_mask": np.array(rec["static_mask"]), "occlusion": np.array(rec["occlusion"])}
