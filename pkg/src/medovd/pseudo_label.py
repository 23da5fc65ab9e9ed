"""Presence-matrix-driven pseudo-labels and image-feature substitution.

For every prediction that overlaps no ground truth (class-agnostic max IoU
below ``T``) the presence matrix entry of the predicted class routes it:

====================  =================  ===============================
matrix value          confidence         action
====================  =================  ===============================
0 (unannotated)       > C                add as pseudo-label
0 (unannotated)       <= C               discard
1 or -1               any                substitute image features (if
                                         the box survives the filters)
====================  =================  ===============================

Substitution crops the expanded box, encodes it with the image encoder,
writes the embedding over a free negative vocabulary entry and binds the box
to that entry. At most ``max_subs`` boxes per image are substituted, highest
confidence first.
"""

from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .geometry import Box, Detection, GroundTruthBox, boxes_to_array, expand_box, iou_matrix
from .presence import ANNOTATED, IMPOSSIBLE, UNANNOTATED, PresenceMatrix
from .vocabulary import SUBSTITUTED, Vocabulary, pick_negative, substitute_entry

__all__ = [
    "Action",
    "Reason",
    "PseudoLabelConfig",
    "PseudoLabelDecision",
    "TrainingTargets",
    "FilterResult",
    "find_unmatched",
    "max_iou_with",
    "decide",
    "filter_box",
    "expand_box",
    "crop",
    "apply",
]


class Action(str, enum.Enum):
    INJECT_PSEUDO_LABEL = "inject"
    FEATURE_SUBSTITUTE = "substitute"
    DISCARD = "discard"


class Reason(str, enum.Enum):
    LOW_CONFIDENCE = "low_confidence"
    UNANNOTATED = "unannotated"
    CLASS_ANNOTATED = "class_annotated"
    CLASS_IMPOSSIBLE = "class_impossible"
    BOX_FILTERED = "box_filtered"
    SUBSTITUTION_CAP = "substitution_cap"
    NO_FREE_NEGATIVE = "no_free_negative"


@dataclass(frozen=True)
class PseudoLabelConfig:
    iou_threshold: float = 0.3
    confidence_threshold: float = 0.9
    expand_factor: float = 1.3
    max_subs: int = 5
    min_area: float = 0.001
    max_area: float = 0.95
    max_background: float = 0.8
    dark_level: int = 5
    substitution_mode: str = "lowest"
    inject: bool = True
    substitute: bool = True
    cap_injections: bool = False

    def __post_init__(self):
        if self.expand_factor < 1:
            raise ValueError("expand_factor must be >= 1")
        if self.max_subs < 0:
            raise ValueError("max_subs must be >= 0")


@dataclass(frozen=True)
class PseudoLabelDecision:
    detection: Detection
    action: Action
    reason: Reason
    class_name: str = ""
    entry_index: Optional[int] = None


@dataclass(frozen=True)
class FilterResult:
    accept: bool
    reason: str = ""

    def __bool__(self):
        return self.accept


@dataclass
class TrainingTargets:
    """Ground truth for one image after pseudo-labeling.

    ``entries[i]`` is the vocabulary index that ``boxes[i]`` is trained
    against; substituted boxes point at their substituted entry.
    """

    boxes: list[GroundTruthBox]
    entries: list[int]
    vocabulary: Vocabulary
    decisions: list[PseudoLabelDecision] = field(default_factory=list)
    counts: Counter = field(default_factory=Counter)

    @property
    def changed(self) -> bool:
        return bool(self.counts["inject"] or self.counts["substitute"])

    @classmethod
    def from_annotations(cls, annotations: Sequence[GroundTruthBox], vocab: Vocabulary) -> "TrainingTargets":
        return cls(list(annotations), [vocab.index_of(a.class_name) for a in annotations], vocab)


def max_iou_with(preds: Sequence[Detection], gts: Sequence[GroundTruthBox]) -> np.ndarray:
    if not preds:
        return np.zeros(0)
    if not gts:
        return np.zeros(len(preds))
    return iou_matrix(boxes_to_array(preds), boxes_to_array(gts)).max(axis=1)


def find_unmatched(preds: Sequence[Detection], gts: Sequence[GroundTruthBox], iou_threshold: float = 0.3) -> list[Detection]:
    """Predictions whose best class-agnostic IoU with any ground truth is below the threshold."""
    best = max_iou_with(preds, gts)
    return [p for p, m in zip(preds, best) if m < iou_threshold]


def decide(
    pred: Detection,
    dataset_id: str,
    matrix: PresenceMatrix,
    confidence_threshold: float,
    labels: Sequence[str],
) -> PseudoLabelDecision:
    """Route one unmatched prediction by its presence-matrix entry.

    ``labels`` names the vocabulary entries ``pred.class_index`` refers to.
    Feature substitution decisions are candidates; box filtering happens in
    :func:`apply`.
    """
    name = labels[pred.class_index]
    value = matrix.lookup(dataset_id, name)
    if value == UNANNOTATED:
        if pred.confidence > confidence_threshold:
            return PseudoLabelDecision(pred, Action.INJECT_PSEUDO_LABEL, Reason.UNANNOTATED, name)
        return PseudoLabelDecision(pred, Action.DISCARD, Reason.LOW_CONFIDENCE, name)
    if value == ANNOTATED:
        return PseudoLabelDecision(pred, Action.FEATURE_SUBSTITUTE, Reason.CLASS_ANNOTATED, name)
    if value == IMPOSSIBLE:
        return PseudoLabelDecision(pred, Action.FEATURE_SUBSTITUTE, Reason.CLASS_IMPOSSIBLE, name)
    raise AssertionError(f"unexpected matrix value {value}")


def filter_box(
    box: Box,
    image: np.ndarray,
    min_area: float = 0.001,
    max_area: float = 0.95,
    max_background: float = 0.8,
    dark_level: int = 5,
) -> FilterResult:
    """Reject tiny, near-full-image and mostly-dark boxes.

    Areas are fractions of the image area. A pixel is dark when every
    channel is ``<= dark_level`` (on the 0..255 scale).
    """
    h, w = image.shape[:2]
    frac = box.area / float(h * w)
    if frac < min_area:
        return FilterResult(False, "too_small")
    if frac > max_area:
        return FilterResult(False, "full_image")
    patch = crop(image, box)
    if patch.size == 0:
        return FilterResult(False, "too_small")
    px = patch if patch.ndim == 2 else patch.max(axis=2)
    if np.mean(px <= dark_level) > max_background:
        return FilterResult(False, "background")
    return FilterResult(True)


def crop(image: np.ndarray, box: Box) -> np.ndarray:
    """Pixels covered by ``box`` (outward-rounded, clipped to the image)."""
    h, w = image.shape[:2]
    x0 = max(0, int(math.floor(box.x_min)))
    y0 = max(0, int(math.floor(box.y_min)))
    x1 = min(w, max(x0 + 1, int(math.ceil(box.x_max))))
    y1 = min(h, max(y0 + 1, int(math.ceil(box.y_max))))
    return image[y0:y1, x0:x1]


def apply(
    preds: Sequence[Detection],
    image: np.ndarray,
    dataset_id: str,
    annotations: Sequence[GroundTruthBox],
    matrix: PresenceMatrix,
    vocab: Vocabulary,
    image_encoder,
    config: PseudoLabelConfig = PseudoLabelConfig(),
    rng: Optional[np.random.Generator] = None,
) -> TrainingTargets:
    """Augment one image's targets from its post-NMS predictions.

    Original annotations are kept untouched and first. Injected boxes bind
    to the predicted entry, which is then marked positive so it is never
    substituted. Substitution candidates are taken by descending confidence
    until ``max_subs`` boxes have passed the filters and been substituted.
    """
    labels = vocab.labels
    targets = TrainingTargets.from_annotations(annotations, vocab)
    unmatched = find_unmatched(preds, annotations, config.iou_threshold)
    if not unmatched:
        return targets

    h, w = image.shape[:2]
    entries = list(vocab.entries)
    decisions: list[PseudoLabelDecision] = []
    candidates: list[PseudoLabelDecision] = []
    n_injected = 0
    for p in unmatched:
        d = decide(p, dataset_id, matrix, config.confidence_threshold, labels)
        if d.action is Action.INJECT_PSEUDO_LABEL:
            if not config.inject or (config.cap_injections and n_injected >= config.max_subs):
                d = replace(d, action=Action.DISCARD)
            else:
                n_injected += 1
                targets.boxes.append(GroundTruthBox(p.box, d.class_name, is_pseudo=True))
                targets.entries.append(p.class_index)
                entries[p.class_index] = replace(entries[p.class_index], is_positive=True)
                d = replace(d, entry_index=p.class_index)
            decisions.append(d)
        elif d.action is Action.FEATURE_SUBSTITUTE:
            candidates.append(d)
        else:
            decisions.append(d)

    vocab = Vocabulary(tuple(entries))
    candidates.sort(key=lambda d: -d.detection.confidence)
    n_subs = 0
    for d in candidates:
        p = d.detection
        if not config.substitute:
            decisions.append(replace(d, action=Action.DISCARD))
            continue
        if n_subs >= config.max_subs:
            decisions.append(replace(d, action=Action.DISCARD, reason=Reason.SUBSTITUTION_CAP))
            continue
        if not filter_box(p.box, image, config.min_area, config.max_area, config.max_background, config.dark_level):
            decisions.append(replace(d, action=Action.DISCARD, reason=Reason.BOX_FILTERED))
            continue
        idx = pick_negative(vocab, config.substitution_mode, rng)
        if idx is None:
            decisions.append(replace(d, action=Action.DISCARD, reason=Reason.NO_FREE_NEGATIVE))
            continue
        embedding = image_encoder.encode_image(crop(image, expand_box(p.box, config.expand_factor, w, h)))
        vocab = substitute_entry(vocab, idx, embedding)
        targets.boxes.append(GroundTruthBox(p.box, SUBSTITUTED, is_pseudo=True))
        targets.entries.append(idx)
        n_subs += 1
        decisions.append(replace(d, entry_index=idx))

    targets.vocabulary = vocab
    targets.decisions = decisions
    for d in decisions:
        if d.action is Action.DISCARD:
            targets.counts["discard:" + d.reason.value] += 1
        else:
            targets.counts[d.action.value] += 1
    return targets
