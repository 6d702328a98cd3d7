"""Synthetic labelled frame pairs, KITTI-format loaders and preprocessing.

Pose convention: ``gt_pose`` maps frame-1 coordinates into frame-2
coordinates, so a static point p of the first cloud appears at
``pose_apply(gt_pose, p)`` in the second.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import geometry as G

STATIC, DYNAMIC = 0, 1
VISIBLE, OCCLUDED = 0, 1


@dataclass
class FramePair:
    P: np.ndarray
    Q: np.ndarray
    gt_flow: np.ndarray = None
    gt_pose: G.Pose = None
    dyn_labels: np.ndarray = None
    occ_labels: np.ndarray = None
    name: str = ""

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64).reshape(-1, 3)
        self.Q = np.asarray(self.Q, dtype=np.float64).reshape(-1, 3)
        n = len(self.P)
        for label in ("gt_flow", "dyn_labels", "occ_labels"):
            v = getattr(self, label)
            if v is not None and len(v) != n:
                raise ValueError(f"{label} has {len(v)} entries for {n} points")


@dataclass
class SceneRecipe:
    n_points: int = 512
    n_objects: int = 2
    object_extent: float = 1.5       # box edge length bound (m)
    ego_rot_deg: float = 3.0         # rotation about z, uniform in [-b, b]
    ego_trans: float = 0.5           # translation norm bound (m)
    object_motion: float = 0.5       # object translation norm bound (m)
    occlusion: float = 0.1           # fraction of P without a counterpart in Q
    noise: float = 0.005             # Gaussian sigma added to Q (m)
    seed: int = 0
    fov_deg: float = 90.0            # horizontal field of view, centred on +x
    range_min: float = 4.0           # background distance band (m)
    range_max: float = 8.0
    object_fraction: float = 0.25    # share of points sampled on objects
    fixed_ego: bool = False          # use the bounds as the exact ego angle and distance

    def __post_init__(self):
        bounds = (self.object_extent, self.ego_rot_deg, self.ego_trans, self.object_motion, self.noise)
        if min(bounds) < 0:
            raise ValueError("recipe bounds must be non-negative")
        if not 0.0 <= self.occlusion < 1.0:
            raise ValueError(f"occlusion fraction must lie in [0, 1), got {self.occlusion}")
        if self.n_points < 1 or self.n_objects < 0:
            raise ValueError("need n_points >= 1 and n_objects >= 0")
        if not 0 < self.fov_deg <= 360 or not 0 < self.range_min < self.range_max:
            raise ValueError("need 0 < fov <= 360 and 0 < range_min < range_max")
        if self.n_objects and not (self.object_extent > 0 and 0 < self.object_fraction < 1):
            raise ValueError("objects need a positive extent and an object fraction in (0, 1)")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def _background(rng, n, r):
    """Points on a wavy wall band around the sensor inside the field of view."""
    half = math.radians(r.fov_deg) / 2
    theta = rng.uniform(-half, half, n)
    phase = rng.uniform(0, 2 * np.pi, 3)
    mid, amp = (r.range_min + r.range_max) / 2, (r.range_max - r.range_min) / 2
    dist = mid + amp * (0.6 * np.sin(3 * theta + phase[0]) + 0.4 * np.sin(7 * theta + phase[1]))
    z = rng.uniform(-1.0, 2.0, n)
    return np.stack([dist * np.cos(theta), dist * np.sin(theta), z], axis=1)


def _box_surface(rng, n, center, size):
    """Uniform samples on the faces of an axis-aligned box, weighted by face area."""
    sx, sy, sz = size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    face = rng.choice(6, n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, (n, 3)) * size
    axis = face // 2
    u[np.arange(n), axis] = np.where(face % 2 == 0, -0.5, 0.5) * size[axis]
    return center + u


def _random_motion(rng, rot_deg, trans, fixed=False):
    ang = math.radians(rot_deg if fixed else rng.uniform(-rot_deg, rot_deg)) if rot_deg else 0.0
    q = G.axis_angle_quat([0.0, 0.0, 1.0], ang)
    d = rng.normal(size=3)
    d[2] *= 0.2
    dist = trans if fixed else rng.uniform(0, trans)
    t = d / (np.linalg.norm(d) + 1e-12) * dist if trans else np.zeros(3)
    return G.Pose(q, t)


def gen_synthetic_pair(recipe: SceneRecipe) -> FramePair:
    """Static background plus rigidly moving boxes with exact flow and labels."""
    r = recipe
    rng = np.random.default_rng(r.seed)
    n_obj_pts = int(round(r.object_fraction * r.n_points)) if r.n_objects else 0
    n_bg = r.n_points - n_obj_pts
    ego = _random_motion(rng, r.ego_rot_deg, r.ego_trans, r.fixed_ego)

    parts = [_background(rng, n_bg, r)]
    Q_parts = [G.pose_apply(ego, parts[0])]
    dyn = [np.zeros(n_bg, dtype=np.int8)]
    counts = np.diff(np.linspace(0, n_obj_pts, r.n_objects + 1).round().astype(int)) if r.n_objects else []
    half = math.radians(r.fov_deg) / 2
    for i, cnt in enumerate(counts):
        size = rng.uniform(0.5, 1.0, 3) * r.object_extent
        theta = -half + (i + 0.5 + rng.uniform(-0.3, 0.3)) * 2 * half / r.n_objects
        dist = rng.uniform(0.45, 0.7) * r.range_min + 1.0
        center = np.array([dist * math.cos(theta), dist * math.sin(theta), size[2] / 2 - 0.5])
        pts = _box_surface(rng, cnt, center, size)
        motion = _random_motion(rng, 5.0 if r.object_motion else 0.0, r.object_motion)
        moved = G.pose_apply(motion, pts - center) + center
        parts.append(pts)
        Q_parts.append(G.pose_apply(ego, moved))
        dyn.append(np.ones(cnt, dtype=np.int8))

    P, Q_full, dyn = np.concatenate(parts), np.concatenate(Q_parts), np.concatenate(dyn)
    perm = rng.permutation(len(P))
    P, Q_full, dyn = P[perm], Q_full[perm], dyn[perm]
    flow = Q_full - P

    occ = np.zeros(len(P), dtype=np.int8)
    n_occ = math.ceil(r.occlusion * len(P)) if r.occlusion > 0 else 0
    if n_occ:
        # a contiguous run in azimuth order is a contiguous angular sector
        order = np.argsort(np.arctan2(P[:, 1], P[:, 0]), kind="stable")
        start = rng.integers(0, len(P) - n_occ + 1)
        occ[order[start:start + n_occ]] = OCCLUDED
    Q = Q_full[occ == VISIBLE]
    if r.noise > 0:
        Q = Q + rng.normal(scale=r.noise, size=Q.shape)
    return FramePair(P, Q, flow, ego, dyn, occ, name=f"synthetic_{r.seed:05d}")


def make_synthetic_dataset(recipe: SceneRecipe, n_scenes):
    """``n_scenes`` pairs with seeds recipe.seed, recipe.seed + 1, ..."""
    base = recipe.to_dict()
    return [gen_synthetic_pair(SceneRecipe(**{**base, "seed": recipe.seed + i})) for i in range(n_scenes)]


# ---------------------------------------------------------------- KITTI formats


def load_kitti_bin(path):
    """Velodyne scan as (N, 3) float32; intensity is dropped."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        whole = len(raw) - len(raw) % 16
        raise ValueError(f"{path}: {len(raw)} bytes is not a multiple of 16; "
                         f"trailing partial record starts at byte offset {whole}")
    return np.frombuffer(raw, dtype="<f4").reshape(-1, 4)[:, :3].copy()


def write_kitti_bin(path, points, intensity=None):
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    inten = np.zeros(len(pts), dtype="<f4") if intensity is None else np.asarray(intensity, dtype="<f4")
    Path(path).write_bytes(np.column_stack([pts, inten]).astype("<f4").tobytes())


def load_kitti_poses(path, tol=1e-3):
    """Absolute poses from a 12-reals-per-line file, as a list of :class:`Pose`."""
    poses = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            vals = line.split()
            if len(vals) != 12:
                raise ValueError(f"{path}:{lineno}: expected 12 values, found {len(vals)}")
            M = np.eye(4)
            try:
                M[:3, :] = np.array(vals, dtype=np.float64).reshape(3, 4)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value in {line.strip()!r}") from None
            try:
                poses.append(G.Pose(G.matrix_to_quat(M[:3, :3], tol=tol), M[:3, 3]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return poses


def relative_poses(poses):
    """T_i^-1 T_{i+1} for consecutive absolute poses."""
    return [a.inverse().compose(b) for a, b in zip(poses[:-1], poses[1:])]


def remove_ground(pc, z_thresh=-1.4):
    """Drop points whose vertical coordinate is below ``z_thresh``; order kept."""
    pc = np.asarray(pc)
    keep = pc[:, 2] >= z_thresh
    if len(pc) and not keep.any():
        raise ValueError(f"ground removal at z < {z_thresh} removed all {len(pc)} points")
    return pc[keep]


def sample_to_n(pc, n, seed=0):
    """Uniform subsample without replacement, or with replacement if too few points."""
    pc = np.asarray(pc)
    if len(pc) < 1:
        raise ValueError("cannot sample from an empty cloud")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pc), n, replace=len(pc) < n)
    return pc[idx]


def kitti_pair(bin_p, bin_q, rel_pose=None, n=8192, seed=0, z_thresh=-1.4):
    """Network-ready pair from two scans; only pose ground truth is available."""
    P = sample_to_n(remove_ground(load_kitti_bin(bin_p), z_thresh), n, seed)
    Q = sample_to_n(remove_ground(load_kitti_bin(bin_q), z_thresh), n, seed + 1)
    return FramePair(P, Q, gt_pose=rel_pose, name=Path(bin_p).stem)


# ---------------------------------------------------------------- batching


def stack_batch(pairs, n=None, seed=0):
    """Stack pairs into arrays; Q is resampled to the size of P.

    Returns a dict with P, Q (B, n, 3) and, when every pair has them,
    flow (B, n, 3), q (B, 4), t (B, 3), dyn, occ (B, n).
    """
    n = n or len(pairs[0].P)
    out = {"P": [], "Q": []}
    for i, pr in enumerate(pairs):
        if len(pr.P) != n:
            raise ValueError(f"pair {pr.name or i} has {len(pr.P)} points, expected {n}")
        out["P"].append(pr.P)
        out["Q"].append(pr.Q if len(pr.Q) == n else sample_to_n(pr.Q, n, seed + i))
    if all(p.gt_flow is not None for p in pairs):
        out["flow"] = [p.gt_flow for p in pairs]
    if all(p.gt_pose is not None for p in pairs):
        out["q"] = [p.gt_pose.q for p in pairs]
        out["t"] = [p.gt_pose.t for p in pairs]
    for key, attr in (("dyn", "dyn_labels"), ("occ", "occ_labels")):
        if all(getattr(p, attr) is not None for p in pairs):
            out[key] = [getattr(p, attr) for p in pairs]
    return {k: np.stack(v) for k, v in out.items()}


# ---------------------------------------------------------------- serialization


def save_pair(directory, pair: FramePair):
    """PLY clouds plus a JSON sidecar with flow, pose and labels."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    name = pair.name or "pair"
    G.write_ply(d / f"{name}_P.ply", pair.P)
    G.write_ply(d / f"{name}_Q.ply", pair.Q)
    side = {"name": name, "P": f"{name}_P.ply", "Q": f"{name}_Q.ply"}
    if pair.gt_flow is not None:
        side["gt_flow"] = np.asarray(pair.gt_flow).tolist()
    if pair.gt_pose is not None:
        side["gt_pose"] = {"q": pair.gt_pose.q.tolist(), "t": pair.gt_pose.t.tolist()}
    for attr in ("dyn_labels", "occ_labels"):
        if getattr(pair, attr) is not None:
            side[attr] = np.asarray(getattr(pair, attr)).tolist()
    path = d / f"{name}.json"
    path.write_text(json.dumps(side))
    return path


def load_pair(sidecar):
    sidecar = Path(sidecar)
    side = json.loads(sidecar.read_text())
    P, _ = G.read_ply(sidecar.parent / side["P"])
    Q, _ = G.read_ply(sidecar.parent / side["Q"])
    pose = side.get("gt_pose")
    return FramePair(
        P, Q,
        gt_flow=np.array(side["gt_flow"]) if "gt_flow" in side else None,
        gt_pose=G.Pose(np.array(pose["q"]), np.array(pose["t"])) if pose else None,
        dyn_labels=np.array(side["dyn_labels"], dtype=np.int8) if "dyn_labels" in side else None,
        occ_labels=np.array(side["occ_labels"], dtype=np.int8) if "occ_labels" in side else None,
        name=side.get("name", sidecar.stem),
    )


def save_dataset(directory, pairs, meta=None):
    """Write every pair and a manifest.json listing their sidecars."""
    d = Path(directory)
    entries = [os.path.relpath(save_pair(d, p), d) for p in pairs]
    manifest = {"pairs": entries, "meta": meta or {}}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return d / "manifest.json"


def load_dataset(directory):
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest.json in {d}")
    manifest = json.loads(mpath.read_text())
    return [load_pair(d / e) for e in manifest["pairs"]]
