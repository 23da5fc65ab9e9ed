"""Two-pass training, base/novel evaluation and speed measurement."""

from __future__ import annotations

import json
import logging
import platform
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .curation import SliceSample
from .detector import (
    DetectorConfig,
    ImageTargets,
    ToyDetector,
    detection_loss,
    postprocess,
    predict,
    prepare_images,
)
from .geometry import Box, Detection, GroundTruthBox
from .metrics import COCO_IOU_THRESHOLDS, ImageResult, map_at
from .presence import PresenceMatrix
from .pseudo_label import PseudoLabelConfig, TrainingTargets, apply
from .vocabulary import Vocabulary, build_vocabulary, encode_labels

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    pass


class EmptyEvaluationSet(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    lr: float = 2e-3
    weight_decay: float = 0.05
    seed: int = 0
    vocab_size: int = 8
    pseudo_labeling: bool = True
    feature_substitution: bool = True
    lambda_indicator: int = 1
    grad_clip: float = 10.0
    encoder_backend: str = "aligned-mock"
    encoder_dim: int = 64
    class_pool: Optional[list] = None
    thresholds: PseudoLabelConfig = field(default_factory=PseudoLabelConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def __post_init__(self):
        for name in ("epochs", "batch_size", "vocab_size", "encoder_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive and weight_decay non-negative")
        if isinstance(self.thresholds, dict):
            self.thresholds = PseudoLabelConfig(**self.thresholds)
        if isinstance(self.detector, dict):
            self.detector = DetectorConfig(**self.detector)
        if self.detector.embed_dim != self.encoder_dim:
            self.detector = replace(self.detector, embed_dim=self.encoder_dim)

    @property
    def mechanisms_enabled(self) -> bool:
        return self.pseudo_labeling or self.feature_substitution

    def pseudo_label_config(self) -> PseudoLabelConfig:
        return replace(self.thresholds, inject=self.pseudo_labeling, substitute=self.feature_substitution)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["detector"]["widths"] = list(self.detector.widths)
        d["detector"]["strides"] = list(self.detector.strides)
        d["detector"]["loss_weights"] = list(self.detector.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# training


class CachedTextEncoder:
    """Memoizes text embeddings; the image side passes straight through."""

    def __init__(self, encoder):
        self.encoder = encoder
        self.dim = encoder.dim
        self._cache: dict[str, np.ndarray] = {}

    def encode_text(self, prompt: str) -> np.ndarray:
        v = self._cache.get(prompt)
        if v is None:
            v = self._cache[prompt] = np.asarray(self.encoder.encode_text(prompt), dtype=np.float64)
        return v

    def encode_texts(self, prompts):
        return np.stack([self.encode_text(p) for p in prompts])

    def encode_image(self, crop):
        return self.encoder.encode_image(crop)


def _scaled_annotations(sample: SliceSample, size: int) -> list[GroundTruthBox]:
    sx = size / sample.width
    sy = size / sample.height
    if sx == 1.0 and sy == 1.0:
        return list(sample.annotations)
    return [
        replace(a, box=Box(a.box.x_min * sx, a.box.y_min * sy, a.box.x_max * sx, a.box.y_max * sy))
        for a in sample.annotations
    ]


def _targets_tensor(t: TrainingTargets, lam: float) -> ImageTargets:
    boxes = torch.tensor([[b.box.x_min, b.box.y_min, b.box.x_max, b.box.y_max] for b in t.boxes],
                         dtype=torch.float32).reshape(-1, 4)
    return ImageTargets(boxes, torch.tensor(t.entries, dtype=torch.long), lam)


@dataclass
class StepResult:
    loss: dict
    counts: Counter
    two_pass: bool


@dataclass
class EpochStats:
    epoch: int
    steps: int
    mean_loss: dict
    losses: list
    counts: dict
    seconds: float

    def as_record(self) -> dict:
        return {
            "epoch": self.epoch,
            "steps": self.steps,
            "loss": self.mean_loss,
            "counts": self.counts,
            "seconds": round(self.seconds, 3),
        }


class Trainer:
    """Owns the model, optimizer and per-run RNG for one training run."""

    def __init__(
        self,
        config: TrainConfig,
        matrix: Optional[PresenceMatrix],
        encoder,
        class_pool: Sequence[str],
        model: Optional[ToyDetector] = None,
        out_dir=None,
    ):
        self.config = config
        self.matrix = matrix
        if config.mechanisms_enabled and matrix is None:
            raise ValueError("pseudo-labeling needs a presence matrix")
        self.encoder = CachedTextEncoder(encoder)
        self.class_pool = list(class_pool)
        if config.mechanisms_enabled:
            missing = [c for c in self.class_pool if c not in matrix.classes]
            if missing:
                raise ValueError(f"class pool entries missing from the presence matrix: {missing}")
        torch.manual_seed(config.seed)
        self.model = model if model is not None else ToyDetector(config.detector)
        self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
        self.rng = np.random.default_rng(config.seed)
        self.epoch = 0
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.history: list[EpochStats] = []

    def vocabulary_for(self, sample: SliceSample) -> Vocabulary:
        vocab = build_vocabulary(sample.class_names(), self.class_pool, self.config.vocab_size, self.rng)
        return encode_labels(self.encoder, vocab)

    def _text(self, vocabs: Sequence[Vocabulary]) -> torch.Tensor:
        return torch.from_numpy(np.stack([v.embeddings() for v in vocabs])).float()

    def step(self, batch: Sequence[SliceSample]) -> StepResult:
        """One optimizer step over a batch (two forward passes when enabled)."""
        cfg = self.config
        size = cfg.detector.input_size
        self.model.train()
        vocabs = [self.vocabulary_for(s) for s in batch]
        images, _ = prepare_images([s.image for s in batch], size)
        anns = [_scaled_annotations(s, size) for s in batch]
        targets = [TrainingTargets.from_annotations(a, v) for a, v in zip(anns, vocabs)]

        side = self.model.image_side(images)
        out = self.model.score(side, self._text(vocabs))
        counts: Counter = Counter()
        two_pass = False
        if cfg.mechanisms_enabled:
            pl_cfg = cfg.pseudo_label_config()
            resized = (images.permute(0, 2, 3, 1) * 255.0).round().to(torch.uint8).numpy()
            for i, s in enumerate(batch):
                dets = postprocess(out, i, self.model.config)
                targets[i] = apply(dets, resized[i], s.dataset_id, anns[i], self.matrix, vocabs[i],
                                   self.encoder, pl_cfg, self.rng)
                counts.update(targets[i].counts)
            if any(t.changed for t in targets):
                two_pass = True
                out = self.model.score(side, self._text([t.vocabulary for t in targets]))

        stats: dict = {}
        loss = detection_loss(self.model, out, [_targets_tensor(t, cfg.lambda_indicator) for t in targets], stats)
        if not torch.isfinite(loss.total):
            self._dump_batch(batch, loss)
            raise NonFiniteLoss(f"non-finite loss {loss.as_floats()} on {[s.sample_id for s in batch]}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.total.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
        self.optimizer.step()
        if stats.get("dfl_clamped"):
            counts["dfl_clamped"] += stats["dfl_clamped"]
        return StepResult(loss.as_floats(), counts, two_pass)

    def _dump_batch(self, batch, loss) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        dump = {
            "epoch": self.epoch,
            "samples": [s.sample_id for s in batch],
            "loss": {k: repr(v) for k, v in loss.as_floats().items()},
        }
        (self.out_dir / "nonfinite_batch.json").write_text(json.dumps(dump, indent=2), encoding="utf-8")

    def train_epoch(self, data: Sequence[SliceSample]) -> EpochStats:
        """Shuffle ``data`` with the run RNG and take one pass of steps."""
        t0 = time.perf_counter()
        order = self.rng.permutation(len(data))
        bs = self.config.batch_size
        losses, counts = [], Counter()
        for start in range(0, len(order), bs):
            res = self.step([data[i] for i in order[start:start + bs]])
            losses.append(res.loss)
            counts.update(res.counts)
        self.epoch += 1
        mean = {k: float(np.mean([l[k] for l in losses])) for k in losses[0]} if losses else {}
        stats = EpochStats(self.epoch, len(losses), mean, losses, dict(counts), time.perf_counter() - t0)
        self.history.append(stats)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            with (self.out_dir / "audit.jsonl").open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(stats.as_record()) + "\n")
        return stats

    def fit(self, data: Sequence[SliceSample], epochs: Optional[int] = None, callback=None) -> list[EpochStats]:
        for _ in range(epochs if epochs is not None else self.config.epochs):
            stats = self.train_epoch(data)
            log.info("epoch %d loss %.4f counts %s", stats.epoch, stats.mean_loss.get("total", float("nan")),
                     stats.counts)
            if callback is not None:
                callback(self, stats)
        return self.history


def train_epoch(trainer: Trainer, data: Sequence[SliceSample]) -> EpochStats:
    return trainer.train_epoch(data)


def baseline_loss(model: ToyDetector, batch: Sequence[SliceSample], vocabs: Sequence[Vocabulary],
                  lambda_indicator: int = 1) -> dict:
    """Single-pass loss on the original annotations (no pseudo-labeling)."""
    size = model.config.input_size
    images, _ = prepare_images([s.image for s in batch], size)
    text = torch.from_numpy(np.stack([v.embeddings() for v in vocabs])).float()
    out = model(images, text)
    targets = [
        _targets_tensor(TrainingTargets.from_annotations(_scaled_annotations(s, size), v), lambda_indicator)
        for s, v in zip(batch, vocabs)
    ]
    return detection_loss(model, out, targets).as_floats()


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    """mAP figures keyed by scope (``"all"`` or a dataset id) then split."""

    metrics: dict
    per_class_ap50: dict
    fps: float
    n_images: int
    n_classes: dict
    hardware: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    def table(self) -> str:
        rows = [f"{'scope':<20}{'split':<14}{'mAP50':>8}{'mAP50:95':>10}"]
        for scope, splits in self.metrics.items():
            for split, m in splits.items():
                rows.append(f"{scope:<20}{split:<14}{100 * m['mAP50']:>8.1f}{100 * m['mAP50:95']:>10.1f}")
        rows.append(f"images: {self.n_images}  classes: {self.n_classes}  FPS: {self.fps:.1f}")
        return "\n".join(rows)


def _partition_metrics(results: Sequence[ImageResult], base: Sequence[str], novel: Sequence[str]) -> dict:
    out = {}
    for split, classes in (("base", list(base)), ("base+novel", list(base) + list(novel))):
        present = [c for c in classes if any(
            g.class_name == c for r in results for g in r.ground_truths
        ) or any(r.class_names[d.class_index] == c for r in results for d in r.detections)]
        if not present:
            continue
        table = map_at(results, COCO_IOU_THRESHOLDS, classes=present)
        out[split] = {"mAP50": table.map50, "mAP50:95": table.map50_95}
    return out


def evaluate(
    model: ToyDetector,
    samples: Sequence[SliceSample],
    base_classes: Sequence[str],
    novel_classes: Sequence[str] = (),
    encoder=None,
    batch_size: int = 16,
    per_dataset: bool = True,
) -> EvalReport:
    """Score a split with the full partition vocabulary (base then novel).

    No confidence floor is applied: all kept detections are ranked by raw
    confidence. The result does not depend on the order of ``samples``.
    """
    if not samples:
        raise EmptyEvaluationSet("evaluation set is empty")
    if set(base_classes) & set(novel_classes):
        raise ValueError("base and novel classes overlap")
    labels = list(base_classes) + list(novel_classes)
    vocab = encode_labels(encoder, Vocabulary.from_labels(labels))
    text = vocab.embeddings()
    order = sorted(range(len(samples)), key=lambda i: samples[i].sample_id)
    results: list[ImageResult] = [None] * len(samples)
    elapsed = 0.0
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        t0 = time.perf_counter()
        dets = predict(model, [samples[i].image for i in idx], text)
        elapsed += time.perf_counter() - t0
        for i, d in zip(idx, dets):
            s = samples[i]
            gts = [a for a in s.annotations if a.class_name in labels and not a.is_pseudo]
            results[i] = ImageResult(d, gts, labels, s.sample_id, s.dataset_id)
    results.sort(key=lambda r: r.image_id)

    metrics = {"all": _partition_metrics(results, base_classes, novel_classes)}
    if per_dataset:
        for ds in sorted({r.dataset_id for r in results}):
            metrics[ds] = _partition_metrics([r for r in results if r.dataset_id == ds], base_classes, novel_classes)
    per_class = map_at(results, (0.5,), classes=labels).per_class
    n_gt_classes = {c for r in results for c in (g.class_name for g in r.ground_truths)}
    return EvalReport(
        metrics=metrics,
        per_class_ap50={c: aps[0.5] for c, aps in per_class.items()},
        fps=len(samples) / elapsed if elapsed > 0 else float("inf"),
        n_images=len(samples),
        n_classes={
            "base": len(base_classes),
            "novel": len(novel_classes),
            "with_ground_truth": len(n_gt_classes),
        },
        hardware=hardware_string(),
    )


def partition_from_manifest(manifest, class_names: Iterable[str]) -> tuple[list[str], list[str]]:
    """Base classes (trained on) and novel classes (held out) of a split."""
    names = list(class_names)
    novel = [c for c in names if c in manifest.holdout_classes]
    base = [c for c in names if c not in manifest.holdout_classes]
    return base, novel


# --------------------------------------------------------------------------
# speed and auxiliary scoring


def hardware_string() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'}, torch threads={torch.get_num_threads()}"


@dataclass
class FpsResult:
    fps: float
    images: int
    seconds: float
    warmup: int
    hardware: str


def measure_fps(model: ToyDetector, images: Sequence[np.ndarray], text: np.ndarray, warmup: int = 5,
                clock=time.perf_counter) -> FpsResult:
    """Single-image forward + NMS throughput, excluding ``warmup`` images."""
    if len(images) <= warmup:
        raise ValueError(f"need more than {warmup} images, got {len(images)}")
    for im in images[:warmup]:
        predict(model, [im], text)
    timed = images[warmup:]
    t0 = clock()
    for im in timed:
        predict(model, [im], text)
    seconds = clock() - t0
    return FpsResult(len(timed) / seconds if seconds > 0 else float("inf"), len(timed), seconds, warmup,
                     hardware_string())


def approximate_mask_confidence(mask) -> float:
    """Mean probability over pixels classified positive (> 0.5); 0 without any."""
    mask = np.asarray(mask, dtype=np.float64)
    pos = mask[mask > 0.5]
    return float(pos.mean()) if pos.size else 0.0


def visualize(model: ToyDetector, samples: Sequence[SliceSample], labels: Sequence[str], encoder, out_dir) -> list[Path]:
    """Draw each image's detections above its elbow threshold into PNG files."""
    from PIL import Image, ImageDraw

    from .geometry import elbow_threshold

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text = encode_labels(encoder, Vocabulary.from_labels(labels)).embeddings()
    paths = []
    for s in samples:
        dets = predict(model, [s.image], text)[0]
        im = Image.fromarray(np.ascontiguousarray(s.image, dtype=np.uint8), mode="RGB")
        if dets:
            thr = elbow_threshold([d.confidence for d in dets])
            draw = ImageDraw.Draw(im)
            for d in dets:
                if d.confidence <= thr:
                    continue
                b = d.box
                draw.rectangle([b.x_min, b.y_min, b.x_max, b.y_max], outline=(255, 255, 0))
                draw.text((b.x_min + 2, b.y_min + 1), f"{labels[d.class_index]} {d.confidence:.2f}",
                          fill=(255, 255, 0))
        path = out_dir / f"{s.sample_id}.png"
        im.save(path)
        paths.append(path)
    return paths
