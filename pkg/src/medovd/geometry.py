"""Box types, IoU, class-wise NMS and the elbow visualization threshold."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from ._accel import njit, select


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in pixel coordinates, origin at the top-left corner."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted box: {coords}")

    @classmethod
    def from_array(cls, values) -> "Box":
        x0, y0, x1, y1 = (float(v) for v in values)
        return cls(x0, y0, x1, y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))


@dataclass(frozen=True)
class Detection:
    """A predicted region.

    ``scores`` holds the per-vocabulary-entry scores when the detector
    attached them; ``class_index`` is the argmax entry and ``confidence`` its
    score.
    """

    box: Box
    class_index: int
    confidence: float
    embedding: Optional[np.ndarray] = field(default=None, compare=False, repr=False)
    scores: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.class_index < 0:
            raise ValueError(f"negative class index {self.class_index}")
        if self.scores is not None and self.class_index >= len(self.scores):
            raise ValueError("class_index outside vocabulary bounds")


@dataclass(frozen=True)
class GroundTruthBox:
    box: Box
    class_name: str
    is_pseudo: bool = False

    def __post_init__(self):
        if not self.class_name:
            raise ValueError("ground-truth class name must be non-empty")

    def as_pseudo(self) -> "GroundTruthBox":
        return replace(self, is_pseudo=True)


def boxes_to_array(boxes: Sequence) -> np.ndarray:
    """Stack ``Box`` objects (or anything carrying a ``.box``) into an (N, 4) array."""
    out = np.empty((len(boxes), 4), dtype=np.float64)
    for i, b in enumerate(boxes):
        b = getattr(b, "box", b)
        out[i] = (b.x_min, b.y_min, b.x_max, b.y_max)
    return out


# --------------------------------------------------------------------------
# kernels


@njit
def _iou_matrix_numba(a, b):
    n = a.shape[0]
    m = b.shape[0]
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
        for j in range(m):
            iw = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
            ih = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            union = area_a + (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1]) - inter
            if union > 0.0:
                out[i, j] = inter / union
    return out


def _iou_matrix_numpy(a, b):
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


@njit
def _nms_numba(boxes, order, labels, iou_threshold):
    n = order.shape[0]
    suppressed = np.zeros(n, dtype=np.bool_)
    keep = np.empty(n, dtype=np.int64)
    n_keep = 0
    for ii in range(n):
        if suppressed[ii]:
            continue
        i = order[ii]
        keep[n_keep] = i
        n_keep += 1
        area_i = (boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
        for jj in range(ii + 1, n):
            if suppressed[jj]:
                continue
            j = order[jj]
            if labels[j] != labels[i]:
                continue
            iw = min(boxes[i, 2], boxes[j, 2]) - max(boxes[i, 0], boxes[j, 0])
            ih = min(boxes[i, 3], boxes[j, 3]) - max(boxes[i, 1], boxes[j, 1])
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            union = area_i + (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1]) - inter
            if union > 0.0 and inter / union > iou_threshold:
                suppressed[jj] = True
    return keep[:n_keep]


def _nms_numpy(boxes, order, labels, iou_threshold):
    boxes = boxes[order]
    labels = labels[order]
    ious = _iou_matrix_numpy(boxes, boxes)
    same = labels[:, None] == labels[None, :]
    conflict = (ious > iou_threshold) & same
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(i)
        alive[i + 1:] &= ~conflict[i, i + 1:]
    return order[np.asarray(keep, dtype=np.int64)]


_iou_matrix = select(_iou_matrix_numba, _iou_matrix_numpy)
_nms_kernel = select(_nms_numba, _nms_numpy)


# --------------------------------------------------------------------------
# public operations


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when the union has zero area."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between two (N, 4) and (M, 4) xyxy arrays (or box sequences)."""
    a = _as_xyxy(a)
    b = _as_xyxy(b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.float64)
    return _iou_matrix(a, b)


def nms_indices(boxes, scores, labels, iou_threshold: float = 0.7) -> np.ndarray:
    """Greedy per-class NMS on raw arrays; returns kept indices by descending score."""
    boxes = _as_xyxy(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(scores) == 0:
        return np.empty(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable").astype(np.int64)
    return _nms_kernel(boxes, order, labels, float(iou_threshold))


def nms(dets: Sequence[Detection], iou_threshold: float = 0.7) -> list[Detection]:
    """Greedy class-wise non-maximum suppression.

    Detections are visited by descending confidence (ties keep input order);
    a detection is dropped when its IoU with an already kept detection of the
    same class exceeds ``iou_threshold``.
    """
    if not dets:
        return []
    keep = nms_indices(
        boxes_to_array(dets),
        [d.confidence for d in dets],
        [d.class_index for d in dets],
        iou_threshold,
    )
    return [dets[i] for i in keep]


def elbow_threshold(confidences: Sequence[float]) -> float:
    """Visualization threshold at the sharpest drop of a descending score curve.

    Returns the midpoint of the largest gap between consecutive scores. Ties
    go to the earliest (highest-confidence) gap. A single score yields a value
    just below it so the detection is kept.
    """
    scores = np.asarray(confidences, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("elbow_threshold needs at least one score")
    if np.any(np.diff(scores) > 0):
        raise ValueError("scores must be sorted in descending order")
    if scores.size == 1:
        return math.nextafter(float(scores[0]), -math.inf)
    gaps = scores[:-1] - scores[1:]
    # gaps equal up to float rounding count as ties
    i = int(np.flatnonzero(gaps >= gaps.max() - 1e-12)[0])
    return 0.5 * (scores[i] + scores[i + 1])


def expand_box(box: Box, factor: float, width: float, height: float) -> Box:
    """Scale a box about its center by ``factor`` and clamp it to the image."""
    if factor < 1:
        raise ValueError(f"expansion factor must be >= 1, got {factor}")
    cx, cy = box.center
    hw = 0.5 * box.width * factor
    hh = 0.5 * box.height * factor
    return Box(
        max(0.0, cx - hw),
        max(0.0, cy - hh),
        min(float(width), cx + hw),
        min(float(height), cy + hh),
    )


def _as_xyxy(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        arr = boxes.astype(np.float64, copy=False)
        return np.ascontiguousarray(arr.reshape(-1, 4))
    boxes = list(boxes)
    if boxes and isinstance(getattr(boxes[0], "box", boxes[0]), Box):
        return boxes_to_array(boxes)
    return np.ascontiguousarray(np.asarray(boxes, dtype=np.float64).reshape(-1, 4))
