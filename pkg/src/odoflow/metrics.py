"""Scene-flow, pose and mask evaluation metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

REL_EPS = 1e-4          # keeps the relative error finite on static points
MASK_THRESHOLD = 0.40   # M below this is classified dynamic


@dataclass
class FlowMetrics:
    epe3d: float
    acc3ds: float
    acc3dr: float
    outliers3d: float

    def to_dict(self):
        return asdict(self)


def flow_errors(pred, gt):
    """Per-point absolute and relative end-point errors."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction has {len(pred)} vectors, ground truth {len(gt)}")
    e = np.linalg.norm(pred - gt, axis=1)
    return e, e / (np.linalg.norm(gt, axis=1) + REL_EPS)


def flow_metrics(pred, gt) -> FlowMetrics:
    """Pooled over every point of ``pred``/``gt`` (any leading shape)."""
    e, r = flow_errors(pred, gt)
    if e.size == 0:
        raise ValueError("flow_metrics needs at least one point")
    return FlowMetrics(
        epe3d=float(e.mean()),
        acc3ds=float(np.mean((e < 0.05) | (r < 0.05))),
        acc3dr=float(np.mean((e < 0.1) | (r < 0.1))),
        outliers3d=float(np.mean((e > 0.3) | (r > 0.1))),
    )


def pose_metrics(q_pred, t_pred, q_gt, t_gt):
    """Translation error (m) and geodesic rotation error (deg); batched inputs are averaged."""
    q_pred, q_gt = np.atleast_2d(q_pred), np.atleast_2d(q_gt)
    t_pred, t_gt = np.atleast_2d(t_pred), np.atleast_2d(t_gt)
    t_err = np.linalg.norm(t_pred - t_gt, axis=-1)
    dot = np.clip(np.abs(np.sum(q_pred * q_gt, axis=-1)), 0.0, 1.0)
    rot = np.degrees(2.0 * np.arccos(dot))
    return {"t_err_m": float(t_err.mean()), "rot_err_deg": float(rot.mean())}


def rank_auc(scores, positives):
    """Probability that a random positive outranks a random negative (ties count half)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    positives = np.asarray(positives, dtype=bool).ravel()
    n_pos, n_neg = positives.sum(), (~positives).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined when only one class is present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    # average ranks over ties
    _, start, counts = np.unique(sorted_scores, return_index=True, return_counts=True)
    avg = start + (counts - 1) / 2.0 + 1.0
    ranks[order] = np.repeat(avg, counts)
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def mask_metrics(mask, dynamic, threshold=MASK_THRESHOLD):
    """Balanced accuracy of ``mask < threshold`` as dynamic, and rank AUC.

    ``mask`` is the static probability; ``dynamic`` is 1 for moving points.
    """
    m = np.asarray(mask, dtype=np.float64).ravel()
    dyn = np.asarray(dynamic).ravel().astype(bool)
    if m.shape != dyn.shape:
        raise ValueError(f"mask has {m.size} values, labels {dyn.size}")
    auc = rank_auc(m, ~dyn)   # static points should score high
    pred_dyn = m < threshold
    ba = 0.5 * (np.mean(pred_dyn[dyn]) + np.mean(~pred_dyn[~dyn]))
    return {"balanced_accuracy": float(ba), "auc": auc}


def to_json(metrics, path=None, note="pooled over all points of the evaluation set"):
    """Serialize a metrics dict (values may be dataclasses)."""
    flat = {k: (v.to_dict() if hasattr(v, "to_dict") else v) for k, v in metrics.items()}
    flat.setdefault("aggregation", note)
    text = json.dumps(flat, indent=2, sort_keys=True)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    return text


def format_table(rows):
    """Column-aligned text table; ``rows`` maps a name to a FlowMetrics."""
    header = ("Method", "EPE3D(m)", "Acc3DS", "Acc3DR", "Outliers3D")
    body = [(name, f"{m.epe3d:.4f}", f"{m.acc3ds:.4f}", f"{m.acc3dr:.4f}", f"{m.outliers3d:.4f}")
            for name, m in rows.items()]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    return "\n".join([fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in body])
