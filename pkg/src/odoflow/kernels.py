"""Hot point-cloud kernels with backend selection at import.

The compiled extension is used when it was built; otherwise the numpy fallback
is loaded. Set ``ODOFLOW_KERNELS=python`` to force the fallback.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("ODOFLOW_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py


def _points(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def fps(pts, m, seed=0, backend=None):
    impl = _pick(backend)
    return impl.fps(_points(pts), int(m), int(seed))


def knn(query, ref, k, backend=None):
    impl = _pick(backend)
    return impl.knn(_points(query), _points(ref), int(k))


def scatter_add(out, index, src, backend=None):
    """In-place ``out[index[r]] += src[r]`` for 2-D ``out``/``src``."""
    impl = _pick(backend)
    index = np.ascontiguousarray(index, dtype=np.int64)
    src = np.ascontiguousarray(src, dtype=out.dtype)
    if out.dtype == np.float64:
        impl.scatter_add(out, index, src)
    elif out.dtype == np.float32:
        impl.scatter_add_f(out, index, src)
    else:
        np.add.at(out, index, src)


def _pick(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _kernels_py
    if backend == "cython":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown kernel backend {backend!r}")
