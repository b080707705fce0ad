"""Box geometry: IoU, greedy NMS, F1 matching and anchor clustering."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class AnnotationError(ValueError):
    """A bounding box lies outside the unit square or has a non-positive extent."""


@dataclass(frozen=True)
class BoundingBox:
    """Center/size box in coordinates normalized to the image (0..1)."""

    cx: float
    cy: float
    w: float
    h: float
    class_id: int = 0

    def __post_init__(self):
        validate_box(self.cx, self.cy, self.w, self.h)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def as_row(self) -> tuple[int, float, float, float, float]:
        return (self.class_id, self.cx, self.cy, self.w, self.h)


def validate_box(cx, cy, w, h) -> None:
    if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0 and 0.0 < w <= 1.0 and 0.0 < h <= 1.0):
        raise AnnotationError(f"box (cx={cx}, cy={cy}, w={w}, h={h}) is outside the unit square")


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    confidence: float


def clamp_box(cx, cy, w, h) -> tuple[float, float, float, float]:
    """Clip a decoded box to the image and return it in center/size form."""
    x0 = min(max(cx - w / 2, 0.0), 1.0)
    y0 = min(max(cy - h / 2, 0.0), 1.0)
    x1 = min(max(cx + w / 2, 0.0), 1.0)
    y1 = min(max(cy + h / 2, 0.0), 1.0)
    # keep a sliver so the box stays valid even when fully clipped
    x1, y1 = max(x1, x0 + 1e-6), max(y1, y0 + 1e-6)
    if x1 > 1.0:
        x0, x1 = 1.0 - 1e-6, 1.0
    if y1 > 1.0:
        y0, y1 = 1.0 - 1e-6, 1.0
    return ((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    return float(iou_matrix(np.array([[a.cx, a.cy, a.w, a.h]]), np.array([[b.cx, b.cy, b.w, b.h]]))[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between n×4 and m×4 arrays of (cx, cy, w, h)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax0, ay0 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2
    ax1, ay1 = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx0, by0 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2
    bx1, by1 = b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.clip(np.minimum(ax1[:, None], bx1[None]) - np.maximum(ax0[:, None], bx0[None]), 0, None)
    ih = np.clip(np.minimum(ay1[:, None], by1[None]) - np.maximum(ay0[:, None], by0[None]), 0, None)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-300), 0.0)


def shape_iou(wh_a: np.ndarray, wh_b: np.ndarray) -> np.ndarray:
    """IoU of boxes sharing a center, from their (w, h) only. Shapes n×2, m×2 → n×m."""
    wh_a = np.asarray(wh_a, dtype=np.float64).reshape(-1, 2)
    wh_b = np.asarray(wh_b, dtype=np.float64).reshape(-1, 2)
    inter = np.minimum(wh_a[:, None, 0], wh_b[None, :, 0]) * np.minimum(wh_a[:, None, 1], wh_b[None, :, 1])
    union = (wh_a[:, 0] * wh_a[:, 1])[:, None] + (wh_b[:, 0] * wh_b[:, 1])[None] - inter
    return inter / union


def nms(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy per-class suppression. Returns kept indices, highest score first.

    Equal scores are ordered by input index (earlier wins), which makes the
    result independent of how ties happen to be arranged by the caller.
    """
    scores = np.asarray(scores)
    classes = np.asarray(classes)
    order = np.argsort(-scores, kind="stable")
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(scores.size, dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= (classes == classes[i]) & (ious[i] > iou_threshold)
    return np.array(keep, dtype=np.int64)


@dataclass(frozen=True)
class F1Score:
    precision: float
    recall: float
    f1: float
    true_positives: int
    n_predictions: int
    n_ground_truth: int


def match_detections(preds: Sequence[Detection], truth: Sequence[BoundingBox], iou_threshold: float = 0.5) -> int:
    """Greedy one-to-one matching, most confident prediction first; returns the true-positive count."""
    order = sorted(range(len(preds)), key=lambda i: -preds[i].confidence)
    used = [False] * len(truth)
    tp = 0
    for i in order:
        p = preds[i].box
        best, best_j = iou_threshold, -1
        for j, g in enumerate(truth):
            if used[j] or g.class_id != p.class_id:
                continue
            v = iou(p, g)
            if v >= best:
                best, best_j = v, j
                if v == 1.0:
                    break
        if best_j >= 0:
            used[best_j] = True
            tp += 1
    return tp


def f1_score(predictions: Sequence[Sequence[Detection]], truths: Sequence[Sequence[BoundingBox]],
             iou_threshold: float = 0.5) -> F1Score:
    """Precision, recall and F1 pooled over a set of images; F1 is 0 when P+R is 0."""
    tp = sum(match_detections(p, t, iou_threshold) for p, t in zip(predictions, truths))
    n_pred = sum(len(p) for p in predictions)
    n_true = sum(len(t) for t in truths)
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_true if n_true else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return F1Score(precision, recall, f1, tp, n_pred, n_true)


def kmeans_anchors(wh: np.ndarray, k: int, rng: np.random.Generator, iterations: int = 100) -> np.ndarray:
    """Cluster box shapes with 1 - IoU as the distance; returns k×2 anchors sorted by area."""
    wh = np.asarray(wh, dtype=np.float64)
    if wh.shape[0] < k:
        raise ValueError(f"need at least {k} boxes to fit {k} anchors, got {wh.shape[0]}")
    centers = wh[rng.choice(wh.shape[0], size=k, replace=False)]
    for _ in range(iterations):
        assign = np.argmax(shape_iou(wh, centers), axis=1)
        new = np.array([np.median(wh[assign == c], axis=0) if (assign == c).any() else centers[c] for c in range(k)])
        if np.allclose(new, centers):
            break
        centers = new
    return centers[np.argsort(centers[:, 0] * centers[:, 1], kind="stable")]
