"""Finite-difference checks of every differentiable op and of the full loss.

Each check returns the worst relative error between backward-mode and
central-difference gradients, computed in float64 on inputs of at most
32 points.
"""

from __future__ import annotations

import time

import numpy as np

from . import costvolume as CV
from . import data as D
from . import encoder as E
from . import geometry as G
from . import init_heads as IH
from . import losses as L
from . import refinement as R
from . import tensor as T

TOLERANCE = 1e-5
CHECKS = {}   # name -> (module, fn)


def check(module):
    def deco(fn):
        CHECKS[fn.__name__.removeprefix("check_")] = (module, fn)
        return fn
    return deco


def _leaf(rng, *shape, lo=None):
    x = rng.normal(size=shape)
    if lo is not None:
        # keep entries away from kinks at zero
        x = np.sign(x) * (lo + np.abs(x))
    return T.Tensor(x, requires_grad=True)


def _scalar(out, rng):
    """Contract an output with fixed random weights into a scalar."""
    w = T.Tensor(np.random.default_rng(1234).normal(size=out.shape))
    return T.tsum(out * w)


def _fd(f, params, **kw):
    kw.setdefault("floor", "auto")
    return T.finite_diff_check(f, params, **kw)


def _op_check(fn, *leaves, **kw):
    rng = np.random.default_rng(0)
    return _fd(lambda ps: _scalar(fn(*ps), rng), list(leaves), **kw)


# ---------------------------------------------------------------- tensor core

_UNARY = {
    "neg": (T.neg, None), "exp": (T.exp, None), "log": (lambda a: T.log(T.absolute(a)), 0.2),
    "sqrt": (lambda a: T.sqrt(T.absolute(a)), 0.2), "absolute": (T.absolute, 0.1),
    "relu": (T.relu, 0.1), "sigmoid": (T.sigmoid, None), "power": (lambda a: T.power(a, 3), None),
    "clamp": (lambda a: T.clamp(a, -0.05, 0.05) + T.clamp(a, -3.0, 3.0), 0.1),
}


@check("tensor_core")
def check_elementwise():
    rng = np.random.default_rng(0)
    worst = 0.0
    for fn, lo in _UNARY.values():
        worst = max(worst, _op_check(fn, _leaf(rng, 3, 4, lo=lo)))
    for fn in (T.add, T.sub, T.mul, T.div):
        b = _leaf(rng, 4, lo=0.3)   # broadcast along the leading axis
        worst = max(worst, _op_check(fn, _leaf(rng, 3, 4), b))
    a, b, w = _leaf(rng, 3, 4), _leaf(rng, 3, 4), T.Tensor(rng.uniform(0.1, 0.9, (3, 4)), requires_grad=True)
    worst = max(worst, _op_check(T.lerp, a, b, w))
    return worst


@check("tensor_core")
def check_reductions():
    rng = np.random.default_rng(1)
    worst = 0.0
    for fn in (lambda a: T.tsum(a, axis=1), lambda a: T.mean(a, axis=(0, 2)), lambda a: T.tmax(a, axis=1),
               lambda a: T.softmax(a, axis=1), lambda a: T.softmax(a, axis=-1)):
        worst = max(worst, _op_check(fn, _leaf(rng, 2, 5, 3)))
    keep = np.random.default_rng(5)
    worst = max(worst, _op_check(lambda a: T.dropout(a, 0.3, np.random.default_rng(5), True), _leaf(keep, 4, 6)))
    return worst


@check("tensor_core")
def check_shape_ops():
    rng = np.random.default_rng(2)
    idx = rng.integers(0, 6, size=(2, 6, 3))
    fns = [
        (lambda a: T.reshape(a, (2, 18)), (2, 6, 3)),
        (lambda a: T.getitem(a, (slice(None), slice(1, 4))), (2, 6, 3)),
        (lambda a: T.concat([a, a * 2.0], axis=-1), (2, 6, 3)),
        (lambda a: T.stack([a, T.exp(a)], axis=1), (2, 6, 3)),
        (lambda a: T.gather(a, idx), (2, 6, 3)),
    ]
    worst = max(_op_check(fn, _leaf(rng, *shape)) for fn, shape in fns)
    worst = max(worst, _op_check(T.matmul, _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)))
    worst = max(worst, _op_check(T.matmul, _leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 2)))
    return worst


@check("tensor_core")
def check_mlp():
    rng = np.random.default_rng(3)
    mlp = T.MLP([7, 5, 4], rng)
    x = _leaf(rng, 2, 6, 7)
    a, b = _leaf(rng, 2, 6, 1, 3), _leaf(rng, 2, 6, 4)
    idx = rng.integers(0, 6, size=(2, 6, 2))
    ps = [x] + list(mlp.params.values())
    worst = _fd(lambda _: _scalar(mlp(x), rng), ps)
    ps = [a, b] + list(mlp.params.values())
    worst = max(worst, _fd(lambda _: _scalar(mlp.parts(a, (b, idx)), rng), ps))
    return worst


# ---------------------------------------------------------------- geometry


@check("geometry")
def check_quaternion_ops():
    rng = np.random.default_rng(4)
    q1, q2, p, t = _leaf(rng, 2, 4), _leaf(rng, 2, 4), _leaf(rng, 2, 5, 3), _leaf(rng, 2, 3)
    worst = _op_check(G.quat_multiply_t, q1, q2)
    worst = max(worst, _op_check(G.rotate_t, q1, p))
    worst = max(worst, _op_check(lambda a, b, c: G.pose_apply_t(G.normalize_quat_t(a), b, c), q1, t, p))
    return max(worst, _op_check(G.normalize_quat_t, q2))


@check("geometry")
def check_three_nn():
    rng = np.random.default_rng(5)
    tgt, src, val = _leaf(rng, 2, 7, 3), _leaf(rng, 2, 9, 3), _leaf(rng, 2, 9, 4)
    return _op_check(G.three_nn_interpolate, tgt, src, val)


# ---------------------------------------------------------------- network blocks


@check("encoder")
def check_set_conv():
    rng = np.random.default_rng(6)
    pts = rng.normal(size=(2, 16, 3))
    feats = _leaf(rng, 2, 16, 4)
    sampled = G.batched_fps(pts, 6)
    mlp = T.MLP([3 + 8, 5, 5], rng)
    return _fd(lambda _: _scalar(E.set_conv(pts, feats, sampled, 4, mlp), rng),
                               [feats] + mlp.parameters())


@check("encoder")
def check_set_upconv():
    rng = np.random.default_rng(7)
    coarse, fine = rng.normal(size=(2, 6, 3)), rng.normal(size=(2, 14, 3))
    fc, ff = _leaf(rng, 2, 6, 4), _leaf(rng, 2, 14, 3)
    up = E.SetUpConv(4, 3, 5, 3, rng)
    return _fd(lambda _: _scalar(up(coarse, fc, fine, ff), rng), [fc, ff] + up.parameters())


@check("costvolume")
def check_attentive_cost_volume():
    rng = np.random.default_rng(8)
    P, Q = _leaf(rng, 2, 10, 3), rng.normal(size=(2, 12, 3))
    fp, fq = _leaf(rng, 2, 10, 4), _leaf(rng, 2, 12, 4)
    acv = CV.AttentiveCostVolume(4, 5, 4, 3, rng)
    return _fd(lambda _: _scalar(acv(P, fp, Q, fq), rng), [P, fp, fq] + acv.parameters())


@check("costvolume")
def check_occlusion_cost_volume():
    rng = np.random.default_rng(9)
    P, Q = _leaf(rng, 2, 10, 3), rng.normal(size=(2, 12, 3))
    fp, fq, prior = _leaf(rng, 2, 10, 4), _leaf(rng, 2, 12, 4), _leaf(rng, 2, 10, 3)
    occ = CV.OccPerceptionCostVolume(4, 5, 3, 4, 3, 3, rng)

    def f(_):
        cv, o, cs = occ(P, fp, Q, fq, prior)
        return _scalar(cv, rng) + _scalar(o, rng)
    return _fd(f, [P, fp, fq, prior] + occ.parameters())


@check("init_heads")
def check_pose_heads():
    rng = np.random.default_rng(10)
    logits, x = _leaf(rng, 2, 8, 5), _leaf(rng, 2, 8, 5)
    fc = T.FC(5, 1, rng)
    reg = IH.PoseRegressor(5, rng, dropout=0.0)

    def f(_):
        w = IH.point_softmax(logits)
        q, t = reg(IH.masked_pool(w, x))
        return _scalar(IH.static_mask(w, fc), rng) + _scalar(q, rng) + _scalar(t, rng)
    return _fd(f, [logits, x] + fc.parameters() + reg.parameters())


@check("refinement")
def check_warp_and_compose():
    rng = np.random.default_rng(11)
    pts = rng.normal(size=(2, 8, 3))
    sf, q, t = _leaf(rng, 2, 8, 3), _leaf(rng, 2, 4), _leaf(rng, 2, 3)
    m = T.Tensor(rng.uniform(0.1, 0.9, (2, 8, 1)), requires_grad=True)
    o = T.Tensor(rng.uniform(0.1, 0.9, (2, 8, 1)), requires_grad=True)
    dq, dt = _leaf(rng, 2, 4), _leaf(rng, 2, 3)

    def f(_):
        qn = G.normalize_quat_t(q)
        pw, _h = R.warp_layer(pts, sf, qn, t, m, o)
        qc, tc = R.compose_pose(qn, t, G.normalize_quat_t(dq), dt)
        return _scalar(pw, rng) + _scalar(qc, rng) + _scalar(tc, rng)
    return _fd(f, [sf, q, t, m, o, dq, dt])


# ---------------------------------------------------------------- losses


@check("losses")
def check_flow_losses():
    rng = np.random.default_rng(12)
    P, Q = rng.normal(size=(2, 16, 3)), rng.normal(size=(2, 16, 3))
    sf = T.Tensor(rng.normal(scale=0.1, size=(2, 16, 3)), requires_grad=True)
    worst = 0.0
    for i in range(3):
        worst = max(worst, _fd(lambda ps: L.flow_level_losses(P, ps[0], Q, k=4)[i], [sf]))
    return worst


@check("losses")
def check_pose_loss():
    rng = np.random.default_rng(13)
    unc = L.UncertaintyParams(0.3, -1.0)
    preds = [(_leaf(rng, 2, 4), _leaf(rng, 2, 3)) for _ in range(4)]
    q_gt = np.stack([G.quat_normalize(v) for v in rng.normal(size=(2, 4))])
    t_gt = rng.normal(size=(2, 3))
    leaves = [x for pr in preds for x in pr] + unc.parameters()
    return _fd(lambda _: L.pose_loss(preds, q_gt, t_gt, unc), leaves)


# ---------------------------------------------------------------- end to end


@check("end_to_end")
def check_total_loss(entries_per_param=2):
    """Total loss of the 32-point network w.r.t. sampled entries of every parameter."""
    from .train import TrainConfig, TrainState, batch_loss

    cfg = TrainConfig(preset="tiny", dtype="float64", loss_k=4, net={"dropout": 0.0})
    state = TrainState(cfg)
    pairs = D.make_synthetic_dataset(D.SceneRecipe(n_points=32, n_objects=1, object_fraction=0.3, seed=3), 2)
    batch = D.stack_batch(pairs, 32)
    params = state.parameters()

    def f(_):
        loss, _parts = batch_loss(state, batch, cfg.loss_weights, True, True, None, cfg.loss_k)
        return loss
    return _fd(f, params, max_entries=entries_per_param)


def run(modules=None, tol=TOLERANCE, out=print):
    """Run the selected checks in float64; returns {name: (module, error, seconds, ok)}."""
    known = sorted({m for m, _ in CHECKS.values()})
    if modules:
        bad = set(modules) - set(known)
        if bad:
            raise ValueError(f"unknown module(s) {sorted(bad)}; choose from {known}")
    results = {}
    with T.default_dtype(np.float64):
        for name, (module, fn) in CHECKS.items():
            if modules and module not in modules:
                continue
            t0 = time.time()
            err = fn()
            dt = time.time() - t0
            ok = bool(err < tol)
            results[name] = (module, err, dt, ok)
            out(f"{'PASS' if ok else 'FAIL'}  {module:<12} {name:<28} max rel err {err:.2e}  ({dt:.1f}s)")
    return results
