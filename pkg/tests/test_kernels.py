"""The compiled and pure-Python kernel backends agree."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from odoflow import kernels

BACKENDS = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])

clouds = arrays(np.float64, st.tuples(st.integers(3, 30), st.just(3)),
                elements=st.floats(-5, 5, allow_nan=False, width=16))


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")


@pytest.mark.parametrize("backend", BACKENDS)
def test_knn_brute_force(backend, rng):
    q, r = rng.normal(size=(15, 3)), rng.normal(size=(25, 3))
    d = ((q[:, None] - r[None]) ** 2).sum(-1)
    expected = np.argsort(d, axis=1, kind="stable")[:, :5]
    np.testing.assert_array_equal(kernels.knn(q, r, 5, backend=backend), expected)


@pytest.mark.parametrize("backend", BACKENDS)
def test_scatter_add(backend):
    out = np.zeros((3, 2))
    kernels.scatter_add(out, np.array([0, 2, 0]), np.ones((3, 2)), backend=backend)
    np.testing.assert_array_equal(out, [[2, 2], [0, 0], [1, 1]])


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled extension not built")
class TestCompiledMatchesPython:
    @given(clouds, st.integers(1, 3))
    def test_knn(self, pts, k):
        a = kernels.knn(pts, pts[::-1].copy(), k, backend="cython")
        b = kernels.knn(pts, pts[::-1].copy(), k, backend="python")
        np.testing.assert_array_equal(a, b)

    @given(clouds, st.integers(1, 3), st.integers(0, 2))
    def test_fps(self, pts, m, seed):
        np.testing.assert_array_equal(kernels.fps(pts, m, seed, backend="cython"),
                                      kernels.fps(pts, m, seed, backend="python"))

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_scatter_add(self, rng, dtype):
        idx = rng.integers(0, 10, size=200)
        src = rng.normal(size=(200, 4)).astype(dtype)
        a, b = np.zeros((10, 4), dtype), np.zeros((10, 4), dtype)
        kernels.scatter_add(a, idx, src, backend="cython")
        kernels.scatter_add(b, idx, src, backend="python")
        np.testing.assert_allclose(a, b, rtol=1e-6)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.knn(np.zeros((1, 3)), np.zeros((1, 3)), 1, backend="fortran")
