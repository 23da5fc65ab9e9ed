"""Procedural corpora for experiments and tests.

Detection images show colored, textured shapes ("organs") on a dark body
silhouette. A class appears at most once per image, so the one-box-per-label
mask conversion yields one box per object. Everything is a pure function of
the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from skimage import draw

from .curation import Modality, SliceSample, VolumeRecord, mask_to_boxes
from .encoders import AlignedMockEncoder


@dataclass(frozen=True)
class ShapeClass:
    name: str
    shape: str
    color: tuple[int, int, int]


SHAPE_CLASSES = (
    ShapeClass("liver", "ellipse", (205, 92, 72)),
    ShapeClass("kidney", "rectangle", (80, 190, 100)),
    ShapeClass("spleen", "triangle", (70, 110, 215)),
    ShapeClass("lesion", "diamond", (225, 205, 70)),
    ShapeClass("tumor", "ring", (200, 80, 200)),
    ShapeClass("cyst", "cross", (80, 200, 210)),
)
# names with text embeddings but no drawn appearance; they fill negative slots
TEXT_ONLY_CLASSES = (
    "heart", "lung", "bladder", "pancreas", "stomach", "aorta",
    "esophagus", "gallbladder", "skull", "brain",
)
ALL_CLASS_NAMES = tuple(c.name for c in SHAPE_CLASSES) + TEXT_ONLY_CLASSES
PALETTE = {c.name: c.color for c in SHAPE_CLASSES}
_BY_NAME = {c.name: c for c in SHAPE_CLASSES}


def aligned_encoder(dim: int = 64, seed: int = 0) -> AlignedMockEncoder:
    """Aligned mock that knows every synthetic class and its drawing color."""
    return AlignedMockEncoder(ALL_CLASS_NAMES, PALETTE, dim=dim, seed=seed)


def _shape_mask(kind: str, cy: float, cx: float, ry: float, rx: float, shape) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    if kind == "ellipse":
        rr, cc = draw.ellipse(cy, cx, ry, rx, shape=shape)
    elif kind == "rectangle":
        rr, cc = draw.rectangle((cy - ry, cx - rx), (cy + ry, cx + rx), shape=shape)
        rr, cc = rr.astype(int), cc.astype(int)
    elif kind == "triangle":
        rr, cc = draw.polygon([cy - ry, cy + ry, cy + ry], [cx, cx - rx, cx + rx], shape=shape)
    elif kind == "diamond":
        rr, cc = draw.polygon([cy - ry, cy, cy + ry, cy], [cx, cx + rx, cx, cx - rx], shape=shape)
    elif kind == "ring":
        rr, cc = draw.ellipse(cy, cx, ry, rx, shape=shape)
        m[rr, cc] = True
        rr, cc = draw.ellipse(cy, cx, ry * 0.55, rx * 0.55, shape=shape)
        m[rr, cc] = False
        return m
    elif kind == "cross":
        for a, b in ((ry, rx * 0.35), (ry * 0.35, rx)):
            rr, cc = draw.rectangle((cy - a, cx - b), (cy + a, cx + b), shape=shape)
            m[rr.astype(int), cc.astype(int)] = True
        return m
    else:
        raise ValueError(f"unknown shape {kind!r}")
    m[rr, cc] = True
    return m


def draw_scene(
    rng: np.random.Generator,
    classes: Sequence[str],
    size: int = 160,
    min_radius: int = 9,
    max_radius: int = 24,
    body_level: tuple[int, int] = (45, 70),
) -> tuple[np.ndarray, np.ndarray, dict[int, str]]:
    """Render one image; returns (RGB uint8 image, label map, label names)."""
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w]
    body = ((yy - h / 2) / (0.47 * h)) ** 2 + ((xx - w / 2) / (0.47 * w)) ** 2 <= 1.0
    level = rng.uniform(*body_level)
    gray = np.where(body, level + rng.normal(0, 6, (h, w)), 0.0)
    image = np.repeat(gray[:, :, None], 3, axis=2)
    labels = np.zeros((h, w), dtype=np.int64)
    names: dict[int, str] = {}
    placed: list[tuple[float, float, float, float]] = []
    for lab, name in enumerate(classes, start=1):
        spec = _BY_NAME[name]
        for _ in range(50):
            ry = rng.uniform(min_radius, max_radius)
            rx = ry * rng.uniform(0.7, 1.4)
            rx = float(np.clip(rx, min_radius, max_radius))
            cy = rng.uniform(0.12 * h + ry, 0.88 * h - ry)
            cx = rng.uniform(0.12 * w + rx, 0.88 * w - rx)
            box = (cx - rx - 3, cy - ry - 3, cx + rx + 3, cy + ry + 3)
            if all(box[2] < b[0] or b[2] < box[0] or box[3] < b[1] or b[3] < box[1] for b in placed):
                break
        else:
            continue
        mask = _shape_mask(spec.shape, cy, cx, ry, rx, (h, w)) & (labels == 0)
        if mask.sum() < 4:
            continue
        placed.append(box)
        color = np.asarray(spec.color, dtype=np.float64) * rng.uniform(0.9, 1.1)
        texture = rng.normal(0, 10, (h, w, 1))
        image[mask] = np.clip(color + texture[mask], 0, 255)
        labels[mask] = lab
        names[lab] = name
    return np.clip(image, 0, 255).round().astype(np.uint8), labels, names


def make_corpus(
    n_images: int,
    classes: Sequence[str] = ("liver", "kidney", "spleen", "lesion"),
    seed: int = 0,
    size: int = 160,
    dataset_id: str = "synth",
    objects_per_image: tuple[int, int] = (1, 3),
    images_per_volume: int = 5,
    modality: Modality = Modality.CT,
    prefix: Optional[str] = None,
    body_level: tuple[float, float] = (45, 70),
) -> list[SliceSample]:
    """``n_images`` rendered scenes with boxes derived from their label maps."""
    unknown = set(classes) - set(_BY_NAME)
    if unknown:
        raise ValueError(f"no drawable shape for {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    prefix = prefix or dataset_id
    lo, hi = objects_per_image
    hi = min(hi, len(classes))
    out = []
    for i in range(n_images):
        k = int(rng.integers(lo, hi + 1))
        chosen = [classes[j] for j in sorted(rng.choice(len(classes), size=k, replace=False))]
        image, labels, names = draw_scene(rng, chosen, size=size, body_level=body_level)
        out.append(
            SliceSample(
                sample_id=f"{prefix}_{i:05d}",
                dataset_id=dataset_id,
                modality=modality,
                image=image,
                annotations=mask_to_boxes(labels, names),
                source_volume_id=f"{prefix}_vol{i // images_per_volume:04d}",
            )
        )
    return out


def drop_class_boxes(
    samples: Sequence[SliceSample],
    class_name: str,
    fraction: float,
    seed: int = 0,
) -> tuple[list[SliceSample], int]:
    """Delete ``round(fraction * n)`` randomly chosen boxes of one class.

    The objects stay in the images. Returns the new samples and the number
    of boxes removed.
    """
    where = [(i, j) for i, s in enumerate(samples) for j, a in enumerate(s.annotations) if a.class_name == class_name]
    n_drop = int(round(fraction * len(where)))
    rng = np.random.default_rng(seed)
    chosen = {where[k] for k in rng.choice(len(where), size=n_drop, replace=False)} if n_drop else set()
    out = []
    for i, s in enumerate(samples):
        anns = [a for j, a in enumerate(s.annotations) if (i, j) not in chosen]
        out.append(replace(s, annotations=anns))
    return out, n_drop


def make_volumes(
    n_volumes: int,
    class_names: Sequence[str],
    seed: int = 0,
    depth: int = 4,
    size: int = 24,
    dataset_id: str = "synthvol",
    modality: Modality = Modality.CT,
    max_classes: int = 3,
) -> list[VolumeRecord]:
    """Small labeled volumes with CT-like intensities for curation checks."""
    rng = np.random.default_rng(seed)
    label_names = {i + 1: n for i, n in enumerate(class_names)}
    out = []
    for v in range(n_volumes):
        image = rng.normal(-800, 50, (depth, size, size))
        labels = np.zeros((depth, size, size), dtype=np.int64)
        k = int(rng.integers(1, min(max_classes, len(class_names)) + 1))
        for lab in rng.choice(len(class_names), size=k, replace=False) + 1:
            z0 = int(rng.integers(0, depth))
            z1 = int(rng.integers(z0, depth)) + 1
            r0, c0 = (int(x) for x in rng.integers(0, size - 4, 2))
            r1 = r0 + int(rng.integers(1, 5))
            c1 = c0 + int(rng.integers(1, 5))
            labels[z0:z1, r0:r1, c0:c1] = lab
            image[z0:z1, r0:r1, c0:c1] = rng.normal(40 * lab, 20)
        out.append(VolumeRecord(f"{dataset_id}_{v:04d}", dataset_id, modality, image, labels, label_names))
    return out
