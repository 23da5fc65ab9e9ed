"""Per-image vocabularies of positive and sampled negative labels."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

SUBSTITUTED = "image-feature-substituted"
DEFAULT_VOCAB_SIZE = 16


class VocabularyError(ValueError):
    pass


class VocabularyTooSmall(UserWarning):
    pass


def default_prompt(label: str) -> str:
    return label.lower()


@dataclass(frozen=True)
class VocabEntry:
    label: str
    embedding: Optional[np.ndarray] = None
    is_positive: bool = False
    substituted: bool = False


@dataclass(frozen=True)
class Vocabulary:
    entries: tuple[VocabEntry, ...]

    def __post_init__(self):
        labels = [e.label for e in self.entries if not e.substituted]
        if len(set(labels)) != len(labels):
            raise VocabularyError(f"duplicate labels in vocabulary: {labels}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> list[str]:
        return [e.label for e in self.entries]

    @property
    def positives(self) -> list[str]:
        return [e.label for e in self.entries if e.is_positive]

    @property
    def encoded(self) -> bool:
        return all(e.embedding is not None for e in self.entries)

    def embeddings(self) -> np.ndarray:
        if not self.encoded:
            raise VocabularyError("vocabulary has not been encoded")
        if not self.entries:
            return np.zeros((0, 0))
        return np.stack([e.embedding for e in self.entries]).astype(np.float64)

    def index_of(self, label: str) -> int:
        for i, e in enumerate(self.entries):
            if e.label == label and not e.substituted:
                return i
        raise KeyError(label)

    def free_negatives(self) -> list[int]:
        return [i for i, e in enumerate(self.entries) if not e.is_positive and not e.substituted]

    @classmethod
    def from_labels(cls, labels: Sequence[str], positives: Sequence[str] = ()) -> "Vocabulary":
        pos = set(positives)
        return cls(tuple(VocabEntry(l, is_positive=l in pos) for l in labels))


def build_vocabulary(
    positive_labels: Sequence[str],
    class_pool: Sequence[str],
    size: int = DEFAULT_VOCAB_SIZE,
    rng: Optional[np.random.Generator] = None,
) -> Vocabulary:
    """All positives followed by uniformly sampled negatives from the pool.

    Negatives are drawn without replacement from ``class_pool`` minus the
    positives. When the pool cannot fill ``size`` entries the vocabulary is
    as large as possible and a :class:`VocabularyTooSmall` warning is issued.
    """
    positives = list(dict.fromkeys(positive_labels))
    if size < len(positives):
        raise VocabularyError(f"vocabulary size {size} < {len(positives)} positives")
    pool = list(dict.fromkeys(class_pool))
    missing = set(positives) - set(pool)
    if missing:
        raise VocabularyError(f"positives not in class pool: {sorted(missing)}")
    rng = rng if rng is not None else np.random.default_rng()
    candidates = [c for c in pool if c not in set(positives)]
    n_neg = size - len(positives)
    if n_neg > len(candidates):
        warnings.warn(
            f"class pool supports only {len(positives) + len(candidates)} entries (wanted {size})",
            VocabularyTooSmall,
            stacklevel=2,
        )
        n_neg = len(candidates)
    picks = rng.choice(len(candidates), size=n_neg, replace=False) if n_neg else []
    entries = [VocabEntry(p, is_positive=True) for p in positives]
    entries += [VocabEntry(candidates[i]) for i in picks]
    return Vocabulary(tuple(entries))


def encode_labels(
    encoder,
    vocab: Vocabulary,
    template: Callable[[str], str] = default_prompt,
) -> Vocabulary:
    """Attach text embeddings to every non-substituted entry.

    Encoding is all-or-nothing: an encoder failure propagates and no partial
    vocabulary is returned.
    """
    todo = [i for i, e in enumerate(vocab.entries) if not e.substituted]
    vectors = encoder.encode_texts([template(vocab.entries[i].label) for i in todo])
    entries = list(vocab.entries)
    for i, v in zip(todo, vectors):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (encoder.dim,) or not np.all(np.isfinite(v)):
            raise VocabularyError(f"encoder returned a bad embedding for {entries[i].label!r}")
        entries[i] = replace(entries[i], embedding=v)
    return Vocabulary(tuple(entries))


def substitute_entry(vocab: Vocabulary, negative_index: int, image_embedding) -> Vocabulary:
    """Swap a negative entry's text embedding for an image embedding.

    Ordering and size are unchanged; the entry's label becomes the
    :data:`SUBSTITUTED` sentinel.
    """
    if not 0 <= negative_index < len(vocab):
        raise VocabularyError(f"index {negative_index} out of range")
    entry = vocab.entries[negative_index]
    if entry.is_positive:
        raise VocabularyError(f"entry {negative_index} ({entry.label!r}) is positive")
    if entry.substituted:
        raise VocabularyError(f"entry {negative_index} is already substituted")
    entries = list(vocab.entries)
    entries[negative_index] = VocabEntry(
        SUBSTITUTED, np.asarray(image_embedding, dtype=np.float64), False, True
    )
    return Vocabulary(tuple(entries))


def pick_negative(vocab: Vocabulary, mode: str = "lowest", rng: Optional[np.random.Generator] = None) -> Optional[int]:
    """Which free negative to substitute next, or None when none remain."""
    free = vocab.free_negatives()
    if not free:
        return None
    if mode == "lowest":
        return free[0]
    if mode == "random":
        rng = rng if rng is not None else np.random.default_rng()
        return int(free[rng.integers(len(free))])
    raise ValueError(f"unknown substitution mode {mode!r}")
