"""Minimal dense tensors with reverse-mode differentiation.

Every op records its parents and a closure mapping the output gradient to
parent gradients. ``backward`` walks the recorded graph in reverse
topological order; only leaves accumulate into ``.grad``.
"""

from __future__ import annotations

import contextlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels

_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype):
    """Select 64-bit (verification) or 32-bit (training) precision."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("dtype must be float32 or float64")
    _DTYPE = dtype


def get_default_dtype():
    return _DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DTYPE, order="C")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # arithmetic sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _make(out, (a, b), bw)


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    ad = a.data
    if p == 2:
        return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,))
    return _make(ad ** p, (a,), lambda g: (p * ad ** (p - 1) * g,))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a):
    out = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0)
        return (r,)

    return _make(out, (a,), bw)


def absolute(a):
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def relu(a):
    ad = a.data
    out = np.maximum(ad, 0)
    return _make(out, (a,), lambda g: (g * (out > 0),))


def sigmoid(a):
    ad = a.data
    # split by sign so large |x| neither overflows nor loses the 1 - tiny tail
    e = np.exp(-np.abs(ad))
    out = np.where(ad >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(ad.dtype)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def clamp(a, lo, hi):
    ad = a.data
    mask = (ad >= lo) & (ad <= hi)
    return _make(np.clip(ad, lo, hi), (a,), lambda g: (g * mask,))


def lerp(a, b, w):
    """a + w * (b - a), exact at w == 0 and w == 1 and when a == b."""
    a, b, w = as_tensor(a), as_tensor(b), as_tensor(w)
    ad, bd, wd = a.data, b.data, w.data
    diff = bd - ad
    out = np.where(wd == 1, bd, ad + wd * diff)

    def bw(g):
        return (_unbroadcast(g * (1.0 - wd), ad.shape) if a.requires_grad else None,
                _unbroadcast(g * wd, bd.shape) if b.requires_grad else None,
                _unbroadcast(g * diff, wd.shape) if w.requires_grad else None)

    return _make(np.ascontiguousarray(out, dtype=np.result_type(ad, bd)), (a, b, w), bw)


def softmax(a, axis=-1):
    a = as_tensor(a)
    nd = a.ndim
    if not -nd <= axis < nd:
        raise ValueError(f"softmax axis {axis} out of range for {nd}-d tensor")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


def dropout(a, rate, rng, training=True):
    if not training or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------- reductions


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def tmax(a, axis):
    """Max over one axis; the gradient goes to the first maximal entry."""
    ad = a.data
    arg = np.expand_dims(ad.argmax(axis=axis), axis)
    out = np.take_along_axis(ad, arg, axis=axis)

    def bw(g):
        full = np.zeros_like(ad)
        np.put_along_axis(full, arg, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(np.squeeze(out, axis), (a,), bw)


# ---------------------------------------------------------------- shape ops


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, idx):
    shape, dtype = a.shape, a.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), bw)


def concat(tensors, axis=-1):
    """Concatenate along ``axis``; other leading dims broadcast."""
    ts = [as_tensor(t) for t in tensors]
    nd = max(t.ndim for t in ts)
    ax = axis % nd
    datas = [t.data.reshape((1,) * (nd - t.ndim) + t.shape) for t in ts]
    target = list(np.broadcast_shapes(*[tuple(1 if i == ax else s for i, s in enumerate(d.shape))
                                        for d in datas]))
    parts = []
    for d in datas:
        target[ax] = d.shape[ax]
        parts.append(np.broadcast_to(d, tuple(target)))
    out = np.concatenate(parts, axis=ax)
    sizes = np.cumsum([p.shape[ax] for p in parts])[:-1]
    shapes = [t.shape for t in ts]

    def bw(g):
        pieces = np.split(g, sizes, axis=ax)
        return tuple(_unbroadcast(p, s) for p, s in zip(pieces, shapes))

    return _make(out, tuple(ts), bw)


def stack(tensors, axis=-1):
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in ts]
    return concat(expanded, axis=axis)


def gather(a, idx):
    """Batched row gather: ``a`` (B, N, C), ``idx`` (B, ...) -> (B, ..., C)."""
    ad = a.data
    B, N = ad.shape[0], ad.shape[1]
    idx = np.asarray(idx, dtype=np.int64)
    flat = (idx + (np.arange(B) * N).reshape((B,) + (1,) * (idx.ndim - 1))).ravel()
    rest = ad.shape[2:]
    src2 = ad.reshape(B * N, -1)
    out = src2[flat].reshape(idx.shape + rest)

    def bw(g):
        full = np.zeros((B * N, src2.shape[1]), dtype=ad.dtype)
        kernels.scatter_add(full, flat, g.reshape(flat.size, -1))
        return (full.reshape(ad.shape),)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def dense(x, W, b=None, act="none"):
    """Fused ``act(x @ W + b)`` over the last axis of ``x``."""
    xd, Wd = x.data, W.data
    out = xd @ Wd
    if b is not None:
        out += b.data
    if act == "relu":
        np.maximum(out, 0, out=out)
    cin = Wd.shape[0]

    def bw(g):
        if act == "relu":
            g = g * (out > 0)
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ Wd.T) if x.requires_grad else None
        gW = xd.reshape(-1, cin).T @ g2 if W.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return (gx, gW) if b is None else (gx, gW, gb)

    parents = (x, W) if b is None else (x, W, b)
    return _make(out, parents, bw)


def bias_act(x, b=None, act="none"):
    xd = x.data
    out = xd + b.data if b is not None else xd.copy()
    if act == "relu":
        np.maximum(out, 0, out=out)

    def bw(g):
        if act == "relu":
            g = g * (out > 0)
        return (g,) if b is None else (g, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _make(out, (x,) if b is None else (x, b), bw)


# ---------------------------------------------------------------- backward


def _toposort(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(_toposort(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.asarray(g, dtype=node.data.dtype).reshape(node.shape)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = pg if k not in grads else grads[k] + pg


# ---------------------------------------------------------------- layers


@dataclass
class MlpSpec:
    """Layer widths (input width first) and per-layer activation."""

    widths: list
    activations: list = None
    has_bias: bool = True

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("an MLP needs an input width and at least one layer")
        if any(int(w) <= 0 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths}")
        if self.activations is None:
            self.activations = ["relu"] * (len(self.widths) - 1)
        if len(self.activations) != len(self.widths) - 1:
            raise ValueError("one activation per layer")
        for act in self.activations:
            if act not in ("relu", "none"):
                raise ValueError(f"unknown activation {act!r}")

    @property
    def n_in(self):
        return self.widths[0]

    @property
    def n_out(self):
        return self.widths[-1]


def init_mlp_params(spec, rng, prefix=""):
    params = {}
    for i, (fi, fo) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        bound = np.sqrt(1.0 / fi)
        params[f"{prefix}{i}.weight"] = Tensor(rng.uniform(-bound, bound, (fi, fo)), requires_grad=True)
        if spec.has_bias:
            params[f"{prefix}{i}.bias"] = Tensor(rng.uniform(-bound, bound, (fo,)), requires_grad=True)
    return params


def mlp_forward(x, spec, params, prefix=""):
    """Affine + activation chain along the last axis."""
    x = as_tensor(x)
    if x.shape[-1] != spec.n_in:
        raise ValueError(f"MLP expects trailing dim {spec.n_in}, got {x.shape[-1]}")
    for i, act in enumerate(spec.activations):
        x = dense(x, params[f"{prefix}{i}.weight"], params.get(f"{prefix}{i}.bias"), act)
    return x


def mlp_forward_parts(parts, spec, params, prefix=""):
    """``mlp_forward`` of the implicit concatenation of ``parts``.

    The first affine layer is split into per-part projections that broadcast
    against each other. A part given as ``(x, idx)`` is projected first and
    then row-gathered with ``idx``, which avoids duplicating ``x`` K times.
    """
    parts = [p if isinstance(p, tuple) else (p, None) for p in parts]
    width = sum(as_tensor(x).shape[-1] for x, _ in parts)
    if width != spec.n_in:
        raise ValueError(f"MLP expects trailing dim {spec.n_in}, got {width}")
    W = params[f"{prefix}0.weight"]
    h, off = None, 0
    for x, idx in parts:
        x = as_tensor(x)
        w = x.shape[-1]
        proj = matmul(x, getitem(W, slice(off, off + w)))
        if idx is not None:
            proj = gather(proj, idx)
        h = proj if h is None else add(h, proj)
        off += w
    h = bias_act(h, params.get(f"{prefix}0.bias"), spec.activations[0])
    for i, act in enumerate(spec.activations[1:], start=1):
        h = dense(h, params[f"{prefix}{i}.weight"], params.get(f"{prefix}{i}.bias"), act)
    return h


class Module:
    """Parameter container; parameters and submodules are plain attributes."""

    training = True

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, dict) and key == "params":
                for k, t in val.items():
                    yield f"{prefix}{k}", t
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict:
            missing = set(own) - set(state)
            extra = set(state) - set(own)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in own.items():
            if k in state:
                arr = np.asarray(state[k])
                if arr.shape != p.shape:
                    raise ValueError(f"{k}: expected shape {p.shape}, got {arr.shape}")
                p.data = np.array(arr, dtype=p.data.dtype)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode=True):
        for m in self._modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def _modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val._modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item._modules()

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class MLP(Module):
    def __init__(self, widths, rng, activations=None, has_bias=True):
        self.spec = MlpSpec(list(widths), activations, has_bias)
        self.params = init_mlp_params(self.spec, rng)

    def __call__(self, x):
        return mlp_forward(x, self.spec, self.params)

    def parts(self, *parts):
        return mlp_forward_parts(parts, self.spec, self.params)

    @property
    def n_out(self):
        return self.spec.n_out


def FC(n_in, n_out, rng):
    """A single affine layer without activation."""
    return MLP([n_in, n_out], rng, activations=["none"])


# ---------------------------------------------------------------- checking


def finite_diff_check(f, params, eps=1e-6, floor=1e-12, max_entries=None, seed=0):
    """Max relative error between backward and central differences.

    ``f`` maps the list ``params`` to a scalar Tensor. Relative error per entry
    is |analytic - numeric| / max(floor, |analytic| + |numeric|); ``floor``
    should sit above the round-off noise of the central difference, which is
    about 1e-16 |f| / eps. ``floor="auto"`` uses 1e-4 max(1, |f|).
    ``max_entries`` checks a seeded random subset of each parameter.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    out = f(params)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("f returned a non-finite value")
    if floor == "auto":
        floor = 1e-4 * max(1.0, abs(out.data.item()))
    backward(out)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        entries = range(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, max_entries, replace=False))
        for i in entries:
            old = flat[i]
            flat[i] = old + eps
            with no_grad():
                fp = f(params).data.item()
            flat[i] = old - eps
            with no_grad():
                fm = f(params).data.item()
            flat[i] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError("f returned a non-finite value")
            num = (fp - fm) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - num) / max(floor, abs(a) + abs(num))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- checkpoints


def save_arrays(path, arrays, meta=None):
    """Write name -> array plus a JSON metadata blob into one ``.npz`` file."""
    payload = {f"arr/{k}": np.asarray(v) for k, v in arrays.items()}
    payload["__meta__"] = np.frombuffer(json.dumps(meta or {}).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_arrays(path):
    with np.load(path, allow_pickle=False) as z:
        arrays = {k[4:]: z[k] for k in z.files if k.startswith("arr/")}
        meta = json.loads(bytes(z["__meta__"]).decode()) if "__meta__" in z.files else {}
    return arrays, meta
