"""Segmentation metrics (instance and category mIoU) plus PCA feature
colorization for qualitative output.

Ground truth may be multi-label: a prediction counts as correct for part j
whenever j is contained in the point's label set. Shape mIoU averages over
parts present in GT union prediction by default; pass average_over="all"
to average over the full part list instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ShapeScore:
    shape_id: str
    category: str
    per_part_iou: dict[str, float] = field(default_factory=dict)
    miou: float = 0.0


def iou_per_part(pred: np.ndarray, gt: list[list[int]],
                 parts: list[str]) -> dict[str, float | None]:
    """IoU_j = |pred=j and j in gt| / |pred=j or j in gt| per part; None for
    parts absent from both prediction and ground truth."""
    pred = np.asarray(pred, dtype=np.int64)
    if pred.shape[0] != len(gt):
        raise ValueError(f"{pred.shape[0]} predictions vs {len(gt)} gt points")
    out: dict[str, float | None] = {}
    for j, name in enumerate(parts):
        inter = 0
        union = 0
        for p, g in zip(pred, gt):
            hit_pred = p == j
            hit_gt = j in g
            if hit_pred and hit_gt:
                inter += 1
            if hit_pred or hit_gt:
                union += 1
        out[name] = None if union == 0 else inter / union
    return out


def shape_score(shape_id: str, category: str, pred: np.ndarray,
                gt: list[list[int]], parts: list[str],
                average_over: str = "present") -> ShapeScore:
    if average_over not in ("present", "all"):
        raise ValueError(f"average_over must be 'present' or 'all', "
                         f"got {average_over!r}")
    ious = iou_per_part(pred, gt, parts)
    if average_over == "present":
        kept = {n: v for n, v in ious.items() if v is not None}
    else:
        kept = {n: (0.0 if v is None else v) for n, v in ious.items()}
    if not kept:
        raise ValueError(f"shape {shape_id}: no parts present in pred or gt")
    return ShapeScore(shape_id=shape_id, category=category,
                      per_part_iou=kept,
                      miou=float(np.mean(list(kept.values()))))


def aggregate_miou_ciou(scores: list[ShapeScore]) -> tuple[float, float]:
    """mIoU = mean over shapes; cIoU = mean over categories of the
    per-category mean."""
    if not scores:
        raise ValueError("no shape scores to aggregate")
    miou = float(np.mean([s.miou for s in scores]))
    by_cat: dict[str, list[float]] = {}
    for s in scores:
        by_cat.setdefault(s.category, []).append(s.miou)
    ciou = float(np.mean([np.mean(v) for v in by_cat.values()]))
    return miou, ciou


def pca_colorize(features: np.ndarray) -> np.ndarray:
    """Project features onto their top-3 principal components and min-max
    scale each channel to [0, 1].

    Sign convention: each component's largest-magnitude loading is positive.
    Degenerate channels (no spread, e.g. rank-deficient input or D < 3)
    render as constant 0.5.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError(f"need at least 3 feature rows, got shape {x.shape}")
    centered = x - x.mean(axis=0)
    if x.shape[1] < 3:
        centered = np.hstack([centered,
                              np.zeros((x.shape[0], 3 - x.shape[1]))])
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:3]
    if comps.shape[0] < 3:
        comps = np.vstack([comps, np.zeros((3 - comps.shape[0],
                                            centered.shape[1]))])
    for c in range(3):
        lead = np.argmax(np.abs(comps[c]))
        if comps[c, lead] < 0:
            comps[c] = -comps[c]
    scores = centered @ comps.T
    out = np.empty_like(scores)
    for c in range(3):
        lo, hi = scores[:, c].min(), scores[:, c].max()
        span = hi - lo
        if span <= 1e-9 * max(1.0, abs(hi), abs(lo)):
            out[:, c] = 0.5
        else:
            out[:, c] = (scores[:, c] - lo) / span
    return out
