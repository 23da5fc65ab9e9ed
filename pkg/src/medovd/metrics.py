"""101-point interpolated average precision and mAP tables."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from ._accel import njit, select
from .geometry import Detection, GroundTruthBox, boxes_to_array, iou_matrix

COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
# exact i/100 grid; np.linspace(0, 1, 101) puts 0.30000000000000004 above 3/10
RECALL_GRID = np.arange(101) / 100.0


class NoEvaluableClasses(ValueError):
    pass


@njit
def _greedy_match_numba(ious, iou_threshold):
    n_det, n_gt = ious.shape
    taken = np.zeros(n_gt, dtype=np.bool_)
    tp = np.zeros(n_det, dtype=np.bool_)
    for i in range(n_det):
        best = -1
        best_iou = iou_threshold
        for j in range(n_gt):
            if taken[j]:
                continue
            v = ious[i, j]
            if v >= best_iou and (best < 0 or v > best_iou):
                best = j
                best_iou = v
        if best >= 0:
            taken[best] = True
            tp[i] = True
    return tp


def _greedy_match_numpy(ious, iou_threshold):
    n_det, n_gt = ious.shape
    taken = np.zeros(n_gt, dtype=bool)
    tp = np.zeros(n_det, dtype=bool)
    for i in range(n_det):
        cand = np.where(taken | (ious[i] < iou_threshold), -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= 0:
            taken[j] = True
            tp[i] = True
    return tp


_greedy_match = select(_greedy_match_numba, _greedy_match_numpy)


def match_detections(det_boxes, det_scores, gt_boxes, iou_threshold: float) -> np.ndarray:
    """True-positive flags for one image's detections, in the order given.

    Detections are visited by descending score; each takes the unmatched
    ground truth with the highest IoU, provided it is ``>= iou_threshold``.
    """
    det_scores = np.asarray(det_scores, dtype=np.float64)
    order = np.argsort(-det_scores, kind="stable")
    tp = np.zeros(len(det_scores), dtype=bool)
    if len(det_scores) == 0 or len(gt_boxes) == 0:
        return tp
    ious = iou_matrix(np.asarray(det_boxes)[order], gt_boxes)
    tp[order] = _greedy_match(np.ascontiguousarray(ious), float(iou_threshold))
    return tp


def interpolated_ap(scores, tp_flags, n_gt: int) -> float:
    """Area under the 101-point interpolated precision/recall curve."""
    if n_gt == 0:
        raise ValueError("interpolated_ap needs at least one ground truth")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.asarray(tp_flags, dtype=bool)[order]
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    recall = tps / n_gt
    precision = tps / (tps + fps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(sampled.mean())


def class_average_precision(
    per_image: Iterable[tuple[Sequence[Detection], Sequence[GroundTruthBox]]],
    iou_threshold: float = 0.5,
) -> Optional[float]:
    """AP of one class pooled over images.

    ``per_image`` yields ``(detections, ground_truths)`` already restricted to
    the class. Returns None when there are neither detections nor ground
    truths, 0 when only detections exist.
    """
    all_scores, all_tp = [], []
    n_gt = 0
    for dets, gts in per_image:
        n_gt += len(gts)
        if not dets:
            continue
        scores = np.array([d.confidence for d in dets], dtype=np.float64)
        tp = match_detections(boxes_to_array(dets), scores, boxes_to_array(gts), iou_threshold)
        all_scores.append(scores)
        all_tp.append(tp)
    n_det = sum(len(s) for s in all_scores)
    if n_gt == 0:
        return None if n_det == 0 else 0.0
    if n_det == 0:
        return 0.0
    return interpolated_ap(np.concatenate(all_scores), np.concatenate(all_tp), n_gt)


def average_precision(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthBox],
    iou_threshold: float = 0.5,
) -> Optional[float]:
    """Single-image, single-class AP (see :func:`class_average_precision`)."""
    return class_average_precision([(list(dets), list(gts))], iou_threshold)


@dataclass
class ImageResult:
    """Detections and ground truth for one image.

    ``class_names[i]`` names detection class index ``i`` (the evaluation
    vocabulary).
    """

    detections: Sequence[Detection]
    ground_truths: Sequence[GroundTruthBox]
    class_names: Sequence[str]
    image_id: str = ""
    dataset_id: str = ""


@dataclass
class MapTable:
    thresholds: tuple[float, ...]
    per_class: dict[str, dict[float, Optional[float]]]
    per_threshold: dict[float, float] = field(default_factory=dict)

    @property
    def classes(self) -> list[str]:
        return [c for c, aps in self.per_class.items() if _class_is_evaluable(aps)]

    @property
    def map50(self) -> float:
        return self.per_threshold[0.5]

    @property
    def map50_95(self) -> float:
        return float(np.mean([self.per_threshold[t] for t in self.thresholds]))

    def class_ap(self, name: str, iou_threshold: float = 0.5) -> Optional[float]:
        return self.per_class[name][iou_threshold]

    def as_dict(self) -> dict:
        out = {"mAP50:95": self.map50_95, "classes": self.classes}
        if 0.5 in self.per_threshold:
            out["mAP50"] = self.map50
        out["per_class_AP50"] = {
            c: aps.get(0.5) for c, aps in self.per_class.items() if _class_is_evaluable(aps)
        }
        return out


def _class_is_evaluable(aps: Mapping[float, Optional[float]]) -> bool:
    return any(v is not None for v in aps.values())


def map_at(
    results: Sequence[ImageResult],
    thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
    classes: Optional[Sequence[str]] = None,
) -> MapTable:
    """Mean AP over classes at each IoU threshold.

    ``classes`` restricts the class universe (e.g. base classes only); by
    default every class named in a ground truth or detection is included.
    Classes without ground truths and detections are excluded from the mean.
    Images are pooled in ``image_id`` order, so equal scores in different
    images rank the same way whatever order the results arrive in.
    """
    thresholds = tuple(float(t) for t in thresholds)
    results = sorted(results, key=lambda r: str(r.image_id))
    if classes is None:
        universe: dict[str, None] = {}
        for r in results:
            for g in r.ground_truths:
                universe.setdefault(g.class_name)
            for d in r.detections:
                universe.setdefault(r.class_names[d.class_index])
        classes = list(universe)
    if not classes:
        raise NoEvaluableClasses("empty class universe")

    grouped = {c: [] for c in classes}
    for r in results:
        by_class = {c: ([], []) for c in classes}
        for d in r.detections:
            name = r.class_names[d.class_index]
            if name in by_class:
                by_class[name][0].append(d)
        for g in r.ground_truths:
            if g.class_name in by_class:
                by_class[g.class_name][1].append(g)
        for c, pair in by_class.items():
            grouped[c].append(pair)

    per_class = {
        c: {t: class_average_precision(grouped[c], t) for t in thresholds} for c in classes
    }
    evaluable = [c for c in classes if _class_is_evaluable(per_class[c])]
    if not evaluable:
        raise NoEvaluableClasses("no class has ground truths or detections")
    per_threshold = {
        t: float(np.mean([per_class[c][t] for c in evaluable])) for t in thresholds
    }
    return MapTable(thresholds, per_class, per_threshold)
