"""Pure numpy fallback for the compiled kernels in ``_kernels.pyx``."""

import numpy as np

_CHUNK = 1024


def fps(pts, m, seed):
    n = pts.shape[0]
    out = np.empty(m, dtype=np.int64)
    mind = np.full(n, np.inf)
    cur = seed
    for j in range(m):
        out[j] = cur
        diff = pts - pts[cur]
        d = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
        np.minimum(mind, d, out=mind)
        mind[out[:j + 1]] = -1.0
        cur = int(np.argmax(mind))
    return out


def knn(query, ref, k):
    out = np.empty((query.shape[0], k), dtype=np.int64)
    for s in range(0, query.shape[0], _CHUNK):
        q = query[s:s + _CHUNK]
        diff = q[:, None, :] - ref[None, :, :]
        d = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
        out[s:s + _CHUNK] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def scatter_add(out, index, src):
    np.add.at(out, index, src)


scatter_add_f = scatter_add
