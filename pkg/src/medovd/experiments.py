"""Desk-scale training experiments on the synthetic corpus."""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch

from .pipeline import TrainConfig, Trainer, evaluate
from .presence import ANNOTATED, UNANNOTATED, PresenceMatrix
from .synthetic import TEXT_ONLY_CLASSES, aligned_encoder, make_corpus

TOY_CLASSES = ("liver", "kidney", "spleen", "lesion")


@dataclass
class OverfitResult:
    map50: float
    map50_95: float
    epochs: int
    seconds: float
    history: list = field(default_factory=list)


def overfit_experiment(
    n_images: int = 200,
    classes: Sequence[str] = TOY_CLASSES,
    vocab_size: int = 8,
    epochs: int = 60,
    seed: int = 0,
    config: Optional[TrainConfig] = None,
) -> OverfitResult:
    """Train without pseudo-labeling and score the training set itself."""
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    data = make_corpus(n_images, classes, seed=seed)
    encoder = aligned_encoder()
    cfg = config or TrainConfig(epochs=epochs, seed=seed, vocab_size=vocab_size,
                                pseudo_labeling=False, feature_substitution=False)
    trainer = Trainer(cfg, None, encoder, list(classes) + list(TEXT_ONLY_CLASSES))
    trainer.fit(data, epochs)
    report = evaluate(trainer.model, data, list(classes), encoder=encoder, per_dataset=False)
    m = report.metrics["all"]["base"]
    return OverfitResult(m["mAP50"], m["mAP50:95"], epochs, time.perf_counter() - t0,
                         [s.mean_loss for s in trainer.history])


@dataclass
class RecoveryResult:
    seed: int
    target: str
    ap50_enabled: float
    ap50_disabled: float
    boxes_deleted: int
    boxes_total: int
    injected: int
    seconds: float

    @property
    def improved(self) -> bool:
        return self.ap50_enabled > self.ap50_disabled


def recovery_experiment(
    seed: int = 0,
    target: str = "lesion",
    classes: Sequence[str] = TOY_CLASSES,
    n_per_source: int = 150,
    n_holdout: int = 100,
    pretrain_epochs: int = 30,
    finetune_epochs: int = 15,
    extra_negatives: int = 4,
) -> RecoveryResult:
    """Annotation recovery on two styled sources sharing one class list.

    Source ``a`` is fully annotated. Source ``b`` (brighter body) never
    annotates ``target`` and marks it 0 in the matrix; since both sources
    are the same size, this deletes half of the target's boxes. A model is
    pretrained on ``a`` alone, then two copies are fine-tuned on ``a`` and
    ``b`` with the same seed, with and without pseudo-label injection.
    Feature substitution is off in both so that injection is the only
    difference. The score is the target's AP50 on fully annotated held-out
    images from both sources.
    """
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    classes = list(classes)
    if target not in classes:
        raise ValueError(f"target {target!r} is not one of {classes}")
    pool = classes + list(TEXT_ONLY_CLASSES[:extra_negatives])
    vocab_size = len(pool)
    encoder = aligned_encoder()
    bright = (95.0, 120.0)

    src_a = make_corpus(n_per_source, classes, seed=seed * 1000 + 1, dataset_id="a")
    full_b = make_corpus(n_per_source, classes, seed=seed * 1000 + 2, dataset_id="b", body_level=bright)
    src_b = [replace(s, annotations=[g for g in s.annotations if g.class_name != target]) for s in full_b]
    n_total = sum(g.class_name == target for s in src_a + full_b for g in s.annotations)
    n_deleted = n_total - sum(g.class_name == target for s in src_a + src_b for g in s.annotations)
    held = make_corpus(n_holdout // 2, classes, seed=seed * 1000 + 3, dataset_id="a", prefix="ha") + make_corpus(
        n_holdout - n_holdout // 2, classes, seed=seed * 1000 + 4, dataset_id="b", prefix="hb", body_level=bright
    )

    values = [[ANNOTATED] * len(pool), [ANNOTATED] * len(pool)]
    for j, c in enumerate(pool):
        if c not in classes:
            values[0][j] = values[1][j] = UNANNOTATED
    values[1][pool.index(target)] = UNANNOTATED
    matrix = PresenceMatrix(("a", "b"), tuple(pool), np.asarray(values, dtype=np.int8))

    base_cfg = TrainConfig(seed=seed, vocab_size=vocab_size, pseudo_labeling=False, feature_substitution=False)
    pre = Trainer(base_cfg, matrix, encoder, pool)
    pre.fit(src_a, pretrain_epochs)

    scores, injected = {}, 0
    for enabled in (True, False):
        cfg = replace(base_cfg, pseudo_labeling=enabled)
        run = Trainer(cfg, matrix, encoder, pool, model=copy.deepcopy(pre.model))
        run.fit(src_a + src_b, finetune_epochs)
        if enabled:
            injected = sum(s.counts.get("inject", 0) for s in run.history)
        report = evaluate(run.model, held, classes, encoder=encoder, per_dataset=False)
        scores[enabled] = report.per_class_ap50[target]
    return RecoveryResult(seed, target, scores[True], scores[False], n_deleted, n_total, injected,
                          time.perf_counter() - t0)
