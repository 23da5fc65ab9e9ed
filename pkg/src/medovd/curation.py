"""Segmentation volumes to normalized 2D detection samples with volume-level splits."""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from ._accel import njit, select
from .geometry import Box, GroundTruthBox

log = logging.getLogger(__name__)

CT_WINDOW = (-500.0, 1000.0)
MRI_PERCENTILES = (0.5, 99.5)


class Modality(str, enum.Enum):
    CT = "CT"
    MRI = "MRI"
    XRAY = "XRay"
    ULTRASOUND = "Ultrasound"
    HISTOPATHOLOGY = "Histopathology"
    DERMOSCOPY = "Dermoscopy"
    FUNDOSCOPY = "Fundoscopy"
    ENDOSCOPY = "Endoscopy"
    MICROSCOPY = "Microscopy"


class ShapeMismatch(ValueError):
    pass


class EmptyTrainingSet(ValueError):
    pass


@dataclass
class VolumeRecord:
    volume_id: str
    dataset_id: str
    modality: Modality
    image_data: np.ndarray
    label_data: np.ndarray
    label_names: Mapping[int, str]

    def __post_init__(self):
        self.modality = Modality(self.modality)
        self.label_names = {int(k): v for k, v in self.label_names.items()}
        if self.image_data.shape != self.label_data.shape:
            raise ShapeMismatch(
                f"{self.volume_id}: image {self.image_data.shape} vs labels {self.label_data.shape}"
            )
        if self.image_data.ndim not in (2, 3):
            raise ShapeMismatch(f"{self.volume_id}: expected 2D or 3D data, got {self.image_data.ndim}D")
        if self.label_data.size and self.label_data.min() < 0:
            raise ValueError(f"{self.volume_id}: negative label values")

    def classes(self) -> set[str]:
        present = np.unique(self.label_data)
        return {self.label_names[int(v)] for v in present if v != 0}


@dataclass
class SliceSample:
    sample_id: str
    dataset_id: str
    modality: Modality
    image: np.ndarray
    annotations: list[GroundTruthBox]
    source_volume_id: str
    image_path: Optional[str] = field(default=None, compare=False)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def class_names(self) -> list[str]:
        return sorted({a.class_name for a in self.annotations})


@dataclass
class SplitManifest:
    train_volume_ids: frozenset[str]
    val_volume_ids: frozenset[str]
    holdout_classes: frozenset[str]
    holdout_volume_ids: frozenset[str] = frozenset()

    def __post_init__(self):
        overlap = self.train_volume_ids & self.val_volume_ids
        if overlap:
            raise ValueError(f"volumes in both splits: {sorted(overlap)[:5]}")

    def split_of(self, volume_id: str) -> str:
        if volume_id in self.train_volume_ids:
            return "train"
        if volume_id in self.val_volume_ids:
            return "val"
        raise KeyError(volume_id)

    def to_dict(self) -> dict:
        return {
            "train_volume_ids": sorted(self.train_volume_ids),
            "val_volume_ids": sorted(self.val_volume_ids),
            "holdout_classes": sorted(self.holdout_classes),
            "holdout_volume_ids": sorted(self.holdout_volume_ids),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitManifest":
        return cls(
            frozenset(d["train_volume_ids"]),
            frozenset(d["val_volume_ids"]),
            frozenset(d["holdout_classes"]),
            frozenset(d.get("holdout_volume_ids", ())),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# --------------------------------------------------------------------------
# intensity handling


def clip_range(raw: np.ndarray, modality) -> tuple[float, float]:
    modality = Modality(modality)
    if modality is Modality.CT:
        return CT_WINDOW
    if modality is Modality.MRI:
        lo, hi = np.percentile(raw, MRI_PERCENTILES)
        return float(lo), float(hi)
    return float(raw.min()), float(raw.max())


def normalize_intensities(raw, modality) -> np.ndarray:
    """Window raw intensities per modality and map them to uint8 [0, 255].

    CT uses a fixed [-500, 1000] window, MRI the 0.5th/99.5th percentiles,
    everything else the data range. Values are rounded half away from zero.
    A zero-width window yields an all-zero image.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("cannot normalize an empty array")
    lo, hi = clip_range(raw, modality)
    if hi <= lo:
        return np.zeros(raw.shape, dtype=np.uint8)
    scaled = (np.clip(raw, lo, hi) - lo) * 255.0 / (hi - lo)
    # non-negative, so half-away-from-zero is floor(x + 0.5)
    return np.floor(scaled + 0.5).astype(np.uint8)


def to_three_channel(gray: np.ndarray) -> np.ndarray:
    gray = np.asarray(gray)
    if gray.ndim == 3 and gray.shape[-1] == 3:
        return gray
    if gray.ndim == 3 and gray.shape[-1] == 1:
        gray = gray[..., 0]
    if gray.ndim != 2:
        raise ValueError(f"expected a single-channel image, got shape {gray.shape}")
    return np.repeat(gray[:, :, None], 3, axis=2)


# --------------------------------------------------------------------------
# masks to boxes


@njit
def _label_extrema_numba(label_slice, n_labels):
    h, w = label_slice.shape
    ext = np.full((n_labels, 4), -1, dtype=np.int64)
    for r in range(h):
        for c in range(w):
            v = label_slice[r, c]
            if v == 0:
                continue
            if ext[v, 0] < 0:
                ext[v, 0] = c
                ext[v, 1] = r
                ext[v, 2] = c
                ext[v, 3] = r
            else:
                if c < ext[v, 0]:
                    ext[v, 0] = c
                if c > ext[v, 2]:
                    ext[v, 2] = c
                ext[v, 3] = r
    return ext


def _label_extrema_numpy(label_slice, n_labels):
    ext = np.full((n_labels, 4), -1, dtype=np.int64)
    for v in np.unique(label_slice):
        if v == 0:
            continue
        rows, cols = np.nonzero(label_slice == v)
        ext[v] = (cols.min(), rows.min(), cols.max(), rows.max())
    return ext


_label_extrema = select(_label_extrema_numba, _label_extrema_numpy)


def mask_to_boxes(label_slice, label_names: Mapping[int, str]) -> list[GroundTruthBox]:
    """One box per label value present, spanning that label's pixel extrema.

    Boxes are (min col, min row, max col, max row) in pixel indices, ordered
    by label value.
    """
    label_slice = np.ascontiguousarray(np.asarray(label_slice).astype(np.int64, copy=False))
    if label_slice.ndim != 2:
        raise ValueError(f"expected a 2D label slice, got shape {label_slice.shape}")
    if label_slice.size == 0 or not label_slice.any():
        return []
    if label_slice.min() < 0:
        raise ValueError("label values must be non-negative")
    ext = _label_extrema(label_slice, int(label_slice.max()) + 1)
    boxes = []
    for v in np.flatnonzero(ext[:, 0] >= 0):
        if int(v) not in label_names:
            raise KeyError(f"label value {v} has no class name")
        x0, y0, x1, y1 = ext[v]
        boxes.append(GroundTruthBox(Box(float(x0), float(y0), float(x1), float(y1)), label_names[int(v)]))
    return boxes


def slice_volume(vol: VolumeRecord) -> list[SliceSample]:
    """Normalize, replicate channels and box every in-plane slice of a volume.

    The first array axis is the slice axis. Normalization statistics are taken
    over the whole volume so slices of one scan share a window.
    """
    image = normalize_intensities(vol.image_data, vol.modality)
    if vol.image_data.ndim == 2:
        image = image[None]
        labels = vol.label_data[None]
    else:
        labels = vol.label_data
    samples = []
    for i in range(image.shape[0]):
        samples.append(
            SliceSample(
                sample_id=f"{vol.volume_id}_s{i:04d}",
                dataset_id=vol.dataset_id,
                modality=vol.modality,
                image=to_three_channel(image[i]),
                annotations=mask_to_boxes(labels[i], vol.label_names),
                source_volume_id=vol.volume_id,
            )
        )
    return samples


# --------------------------------------------------------------------------
# splitting

VolumeLike = Union[VolumeRecord, tuple]


def _volume_id_and_classes(v: VolumeLike) -> tuple[str, set[str]]:
    if isinstance(v, VolumeRecord):
        return v.volume_id, v.classes()
    volume_id, classes = v
    return str(volume_id), set(classes)


def volume_level_split(
    volumes: Sequence[VolumeLike],
    val_fraction: float = 0.05,
    holdout_classes: Iterable[str] = (),
    seed: int = 0,
) -> SplitManifest:
    """Seeded train/val split by whole volume.

    Volumes containing any holdout class always go to validation. The
    remaining volumes are shuffled and ``floor(val_fraction * n)`` of them go
    to validation, so training keeps at least ``1 - val_fraction``.
    ``volumes`` holds ``VolumeRecord`` objects or ``(volume_id, classes)`` pairs.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    holdout = frozenset(holdout_classes)
    seen: set[str] = set()
    eligible, held = [], []
    for v in volumes:
        vid, classes = _volume_id_and_classes(v)
        if vid in seen:
            raise ValueError(f"duplicate volume id {vid!r}")
        seen.add(vid)
        (held if classes & holdout else eligible).append(vid)
    if not eligible:
        raise EmptyTrainingSet("every volume contains a holdout class")

    eligible.sort()
    order = np.random.default_rng(seed).permutation(len(eligible))
    shuffled = [eligible[i] for i in order]
    n_val = int(math.floor(val_fraction * len(shuffled) + 1e-9))
    val = set(shuffled[:n_val]) | set(held)
    train = set(shuffled[n_val:])
    return SplitManifest(frozenset(train), frozenset(val), holdout, frozenset(held))


def check_split(manifest: SplitManifest, train: Sequence[SliceSample], val: Sequence[SliceSample]) -> list[str]:
    """Leakage problems between curated splits; empty when clean."""
    problems = []
    train_vols = {s.source_volume_id for s in train}
    val_vols = {s.source_volume_id for s in val}
    for vid in sorted(train_vols & val_vols):
        problems.append(f"volume {vid} has slices in both splits")
    for s in train:
        if s.source_volume_id not in manifest.train_volume_ids:
            problems.append(f"{s.sample_id}: volume {s.source_volume_id} not in train manifest")
        for a in s.annotations:
            if a.class_name in manifest.holdout_classes:
                problems.append(f"{s.sample_id}: holdout class {a.class_name!r} in training")
    return problems


# --------------------------------------------------------------------------
# ingestion and record files

Loader = Callable[[Path], np.ndarray]


def _load_npy(path: Path) -> np.ndarray:
    return np.load(path, allow_pickle=False)


def _load_npz(path: Path) -> np.ndarray:
    with np.load(path, allow_pickle=False) as z:
        return z[z.files[0]]


def _load_image(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im)
        if arr.ndim == 3:
            arr = np.asarray(im.convert("L"))
        return arr


LOADERS: dict[str, Loader] = {
    ".npy": _load_npy,
    ".npz": _load_npz,
    ".png": _load_image,
    ".tif": _load_image,
    ".tiff": _load_image,
    ".jpg": _load_image,
}


def register_loader(suffix: str, loader: Loader) -> None:
    """Plug in an array reader, e.g. a NIfTI adapter for ``.nii.gz``."""
    LOADERS[suffix.lower()] = loader


def load_array(path) -> np.ndarray:
    path = Path(path)
    name = path.name.lower()
    for suffix in sorted(LOADERS, key=len, reverse=True):
        if name.endswith(suffix):
            return LOADERS[suffix](path)
    raise ValueError(f"no loader registered for {path}")


def read_descriptor(path) -> list[VolumeRecord]:
    """Load every volume listed in a dataset descriptor (JSON or YAML).

    Layout::

        dataset_id: amos
        volumes:
          - volume_id: amos_0001
            image: imgs/amos_0001.npy
            label: gts/amos_0001.npy
            modality: CT
            label_names: {1: liver, 2: spleen}

    Relative paths resolve against the descriptor's directory.
    """
    import yaml

    path = Path(path)
    doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    if not isinstance(doc, dict) or "volumes" not in doc:
        raise ValueError(f"{path}: descriptor needs a 'volumes' list")
    dataset_id = str(doc.get("dataset_id", path.stem))
    out = []
    for entry in doc["volumes"]:
        missing = {"volume_id", "image", "label", "modality", "label_names"} - set(entry)
        if missing:
            raise ValueError(f"{path}: volume entry missing {sorted(missing)}")
        out.append(
            VolumeRecord(
                volume_id=str(entry["volume_id"]),
                dataset_id=str(entry.get("dataset_id", dataset_id)),
                modality=Modality(entry["modality"]),
                image_data=load_array(path.parent / entry["image"]),
                label_data=load_array(path.parent / entry["label"]).astype(np.int64),
                label_names=entry["label_names"],
            )
        )
    return out


def sample_to_record(sample: SliceSample, image_path: str) -> dict:
    return {
        "sample_id": sample.sample_id,
        "dataset_id": sample.dataset_id,
        "modality": Modality(sample.modality).value,
        "image": image_path,
        "boxes": [list(a.box.as_array()) for a in sample.annotations],
        "classes": [a.class_name for a in sample.annotations],
        "is_pseudo": [a.is_pseudo for a in sample.annotations],
        "source_volume_id": sample.source_volume_id,
    }


def record_to_sample(record: Mapping, root: Path) -> SliceSample:
    from PIL import Image

    image_path = root / record["image"]
    with Image.open(image_path) as im:
        image = np.asarray(im.convert("RGB"))
    flags = record.get("is_pseudo") or [False] * len(record["classes"])
    anns = [
        GroundTruthBox(Box.from_array(b), c, bool(p))
        for b, c, p in zip(record["boxes"], record["classes"], flags)
    ]
    return SliceSample(
        sample_id=record["sample_id"],
        dataset_id=record["dataset_id"],
        modality=Modality(record["modality"]),
        image=image,
        annotations=anns,
        source_volume_id=record["source_volume_id"],
        image_path=str(image_path),
    )


def write_records(path, samples: Iterable[SliceSample], image_dir=None) -> int:
    """Write samples as UTF-8 JSON lines plus one RGB PNG per sample.

    Image paths in the records are relative to the record file's directory.
    """
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image_dir = Path(image_dir) if image_dir is not None else path.parent / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    n = 0
    with path.open("w", encoding="utf-8") as fh:
        for s in samples:
            png = image_dir / f"{s.sample_id}.png"
            Image.fromarray(np.ascontiguousarray(s.image, dtype=np.uint8), mode="RGB").save(png)
            rel = Path(_relpath(png, path.parent))
            fh.write(json.dumps(sample_to_record(s, rel.as_posix())) + "\n")
            n += 1
    return n


def read_records(path) -> list[SliceSample]:
    path = Path(path)
    out = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(record_to_sample(json.loads(line), path.parent))
            except (KeyError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad record ({exc})") from exc
    return out


def _relpath(target: Path, start: Path) -> str:
    import os

    return os.path.relpath(target, start)


def curate(
    descriptors: Sequence,
    out_dir,
    val_fraction: float = 0.05,
    holdout_classes: Iterable[str] = (),
    seed: int = 0,
) -> SplitManifest:
    """Descriptor files to ``train.jsonl``, ``val.jsonl`` and ``manifest.json``."""
    out_dir = Path(out_dir)
    volumes = [v for d in descriptors for v in read_descriptor(d)]
    manifest = volume_level_split(volumes, val_fraction, holdout_classes, seed)
    train, val = [], []
    for vol in volumes:
        target = train if vol.volume_id in manifest.train_volume_ids else val
        target.extend(slice_volume(vol))
    problems = check_split(manifest, train, val)
    if problems:
        raise RuntimeError("split leakage: " + "; ".join(problems[:5]))
    out_dir.mkdir(parents=True, exist_ok=True)
    write_records(out_dir / "train.jsonl", train)
    write_records(out_dir / "val.jsonl", val)
    manifest.save(out_dir / "manifest.json")
    log.info("curated %d train / %d val slices from %d volumes", len(train), len(val), len(volumes))
    return manifest
