# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled point-cloud kernels. Semantics mirror ``_kernels_py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def fps(double[:, ::1] pts, Py_ssize_t m, Py_ssize_t seed):
    cdef Py_ssize_t n = pts.shape[0]
    cdef Py_ssize_t i, j, best
    cdef double dx, dy, dz, d, bestd
    out = np.empty(m, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    cdef double[::1] mind = np.full(n, INFINITY)
    cdef Py_ssize_t cur = seed
    for j in range(m):
        o[j] = cur
        mind[cur] = -1.0    # never reselect, even among duplicates
        best = 0
        bestd = -1.0
        for i in range(n):
            dx = pts[i, 0] - pts[cur, 0]
            dy = pts[i, 1] - pts[cur, 1]
            dz = pts[i, 2] - pts[cur, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < mind[i]:
                mind[i] = d
            if mind[i] > bestd:
                bestd = mind[i]
                best = i
        cur = best
    return out


def knn(double[:, ::1] query, double[:, ::1] ref, Py_ssize_t k):
    cdef Py_ssize_t nq = query.shape[0], nr = ref.shape[0]
    cdef Py_ssize_t i, j, p
    cdef double dx, dy, dz, d
    out = np.empty((nq, k), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] o = out
    cdef double[::1] bd = np.empty(k)
    cdef cnp.int64_t[::1] bi = np.empty(k, dtype=np.int64)
    cdef Py_ssize_t filled
    for i in range(nq):
        filled = 0
        for j in range(nr):
            dx = query[i, 0] - ref[j, 0]
            dy = query[i, 1] - ref[j, 1]
            dz = query[i, 2] - ref[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if filled == k and d >= bd[k - 1]:
                continue
            # stable insertion: equal distances keep the earlier (lower) index first
            if filled < k:
                p = filled
                filled += 1
            else:
                p = k - 1
            while p > 0 and bd[p - 1] > d:
                bd[p] = bd[p - 1]
                bi[p] = bi[p - 1]
                p -= 1
            bd[p] = d
            bi[p] = j
        for p in range(k):
            o[i, p] = bi[p]
    return out


def scatter_add(double[:, ::1] out, cnp.int64_t[::1] index, double[:, ::1] src):
    cdef Py_ssize_t r, c, t
    cdef Py_ssize_t nc = src.shape[1]
    for r in range(src.shape[0]):
        t = index[r]
        for c in range(nc):
            out[t, c] += src[r, c]


def scatter_add_f(float[:, ::1] out, cnp.int64_t[::1] index, float[:, ::1] src):
    cdef Py_ssize_t r, c, t
    cdef Py_ssize_t nc = src.shape[1]
    for r in range(src.shape[0]):
        t = index[r]
        for c in range(nc):
            out[t, c] += src[r, c]
