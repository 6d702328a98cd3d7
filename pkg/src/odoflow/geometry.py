"""Point-cloud and rigid-motion primitives.

Quaternions are (w, x, y, z), Hamilton convention. Functions named ``*_t``
operate on :class:`~odoflow.tensor.Tensor` and participate in differentiation;
the plain versions take numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import tensor as T

INTERP_EPS = 1e-8


# ---------------------------------------------------------------- sampling / neighbors


def fps(pc, m, seed_index=0):
    """Greedy farthest point sampling; ties go to the lowest index."""
    pc = np.asarray(pc)
    n = len(pc)
    if not 1 <= m <= n:
        raise ValueError(f"fps needs 1 <= m <= N, got m={m}, N={n}")
    if not 0 <= seed_index < n:
        raise ValueError(f"seed_index {seed_index} out of range for N={n}")
    return kernels.fps(pc, m, seed_index)


def knn(query, reference, k):
    """Indices of the k nearest reference points per query, ascending distance."""
    query, reference = np.asarray(query), np.asarray(reference)
    if not 1 <= k <= len(reference):
        raise ValueError(f"knn needs 1 <= k <= |reference|, got k={k}, |reference|={len(reference)}")
    return kernels.knn(query, reference, k)


def batched_knn(query, reference, k):
    query, reference = np.asarray(query), np.asarray(reference)
    return np.stack([knn(q, r, k) for q, r in zip(query, reference)])


def batched_fps(pcs, m, seed_index=0):
    return np.stack([fps(pc, m, seed_index) for pc in np.asarray(pcs)])


def _data(x):
    return x.data if isinstance(x, T.Tensor) else np.asarray(x)


def three_nn_interpolate(targets, sources, values):
    """Inverse-distance interpolation from the 3 nearest sources.

    Batched: ``targets`` (B, M, 3), ``sources`` (B, N, 3), ``values`` (B, N, C).
    Any argument may be a Tensor; weights are differentiable w.r.t. both clouds.
    """
    if _data(sources).shape[1] < 3:
        raise ValueError("three_nn_interpolate needs at least 3 sources")
    if not np.all(np.isfinite(_data(values))):
        raise ValueError("non-finite values passed to three_nn_interpolate")
    idx = batched_knn(_data(targets), _data(sources), 3)
    tgt, src, vals = T.as_tensor(targets), T.as_tensor(sources), T.as_tensor(values)
    nb = T.gather(src, idx)                                   # B, M, 3, 3
    diff = nb - T.reshape(tgt, tgt.shape[:2] + (1, 3))
    d = T.sqrt(T.tsum(diff * diff, axis=-1, keepdims=True))    # B, M, 3, 1
    inv = 1.0 / (d + INTERP_EPS)
    w = inv / T.tsum(inv, axis=2, keepdims=True)
    return T.tsum(T.gather(vals, idx) * w, axis=2)


# ---------------------------------------------------------------- quaternions (numpy)


def quat_multiply(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conjugate(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_inverse(q):
    q = np.asarray(q, dtype=np.float64)
    return quat_conjugate(q) / np.sum(q * q, axis=-1, keepdims=True)


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_matrix(q):
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R, tol=1e-3):
    """Rotation matrix to unit quaternion with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    if np.abs(R @ R.T - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError("matrix is not a rotation (orthonormality off by more than tolerance)")
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = quat_normalize(q)
    return q if q[0] >= 0 else -q


def axis_angle_quat(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


@dataclass
class Pose:
    """Rigid transform p -> R(q) p + t."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=np.float64)
        return cls(matrix_to_quat(M[:3, :3]), M[:3, 3].copy())

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = quat_to_matrix(self.q)
        M[:3, 3] = self.t
        return M

    def inverse(self):
        qi = quat_conjugate(quat_normalize(self.q))
        return Pose(qi, -rotate(qi, self.t))

    def compose(self, other):
        """``self`` after ``other``."""
        return Pose(quat_multiply(self.q, other.q), rotate(self.q, other.t) + self.t)


def rotate(q, p):
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    u = q[1:]
    w = q[0]
    uv = np.cross(u, p)
    return p + 2.0 * (w * uv + np.cross(u, uv))


def pose_apply(pose, p):
    """Rotate then translate; ``p`` is (3,) or (N, 3)."""
    nq = np.linalg.norm(pose.q)
    if abs(nq - 1.0) > 1e-3:
        raise ValueError(f"pose quaternion is not unit norm (|q| = {nq:.6f}); normalize upstream")
    return rotate(pose.q, p) + pose.t


# ---------------------------------------------------------------- quaternions (Tensor)


def _split4(q):
    return q[..., 0:1], q[..., 1:2], q[..., 2:3], q[..., 3:4]


def quat_multiply_t(a, b):
    aw, ax, ay, az = _split4(a)
    bw, bx, by, bz = _split4(b)
    return T.concat([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def _cross_t(u, v):
    ux, uy, uz = u[..., 0:1], u[..., 1:2], u[..., 2:3]
    vx, vy, vz = v[..., 0:1], v[..., 1:2], v[..., 2:3]
    return T.concat([uy * vz - uz * vy, uz * vx - ux * vz, ux * vy - uy * vx], axis=-1)


def rotate_t(q, p):
    """Rotate points ``p`` (B, N, 3) by unit quaternions ``q`` (B, 4)."""
    q = T.as_tensor(q)
    qb = T.reshape(q, (q.shape[0], 1, 4))
    w, u = qb[..., 0:1], qb[..., 1:4]
    uv = _cross_t(u, p)
    return p + 2.0 * (w * uv + _cross_t(u, uv))


def pose_apply_t(q, t, p):
    """Differentiable Eq.-style warp q p q^-1 + t for a batch of unit quaternions."""
    t = T.as_tensor(t)
    return rotate_t(q, p) + T.reshape(t, (t.shape[0], 1, 3))


def normalize_quat_t(v, eps=1e-8):
    """Unit quaternion from a raw 4-vector; ``eps`` on w makes zero map to identity."""
    v = T.as_tensor(v)
    v = v + np.array([eps, 0.0, 0.0, 0.0])
    return v / T.sqrt(T.tsum(v * v, axis=-1, keepdims=True))


# ---------------------------------------------------------------- export


def write_ply(path, points, colors=None, extra=None):
    """ASCII PLY with optional uint8 RGB and extra float properties."""
    points = np.asarray(points, dtype=np.float64)
    extra = extra or {}
    lines = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
             "property float x", "property float y", "property float z"]
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8)
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    for name in extra:
        lines.append(f"property float {name}")
    lines.append("end_header")
    cols = [points]
    if colors is not None:
        cols.append(colors)
    for v in extra.values():
        cols.append(np.asarray(v, dtype=np.float64).reshape(len(points), -1))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
        for i in range(len(points)):
            row = []
            for c in cols:
                if c.dtype == np.uint8:
                    row.extend(str(int(x)) for x in c[i])
                else:
                    row.extend(repr(float(x)) for x in c[i])
            fh.write(" ".join(row) + "\n")


def read_ply(path):
    """Read an ASCII PLY written by :func:`write_ply`; returns (points, props)."""
    with open(path) as fh:
        header = []
        for line in fh:
            line = line.strip()
            header.append(line)
            if line == "end_header":
                break
        if not header or header[0] != "ply":
            raise ValueError(f"{path}: not a PLY file")
        names = [h.split()[-1] for h in header if h.startswith("property")]
        n = int(next(h for h in header if h.startswith("element vertex")).split()[-1])
        body = np.loadtxt(fh, ndmin=2) if n else np.zeros((0, len(names)))
    if body.shape[0] != n:
        raise ValueError(f"{path}: header declares {n} vertices, found {body.shape[0]}")
    props = {name: body[:, i] for i, name in enumerate(names)}
    pts = np.stack([props.pop("x"), props.pop("y"), props.pop("z")], axis=1)
    return pts, props
