"""Dataset-class presence matrix.

Each (dataset, class) pair carries one of three values:

* ``1``  the class is annotated in the dataset,
* ``0``  the class may appear but is not annotated,
* ``-1`` the class cannot appear in the dataset.

The on-disk format is a small CSV: a header ``dataset,<class>,<class>,...``
followed by one row per dataset.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

ANNOTATED = 1
UNANNOTATED = 0
IMPOSSIBLE = -1
VALID_VALUES = (ANNOTATED, UNANNOTATED, IMPOSSIBLE)


class MatrixParseError(ValueError):
    def __init__(self, message: str, row: int | None = None, column: int | None = None):
        loc = ""
        if row is not None:
            loc = f"row {row}" + (f", column {column}" if column is not None else "") + ": "
        super().__init__(loc + message)
        self.row = row
        self.column = column


class UnknownEntry(KeyError):
    pass


@dataclass(frozen=True)
class PresenceMatrix:
    datasets: tuple[str, ...]
    classes: tuple[str, ...]
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.int8)
        if values.shape != (len(self.datasets), len(self.classes)):
            raise ValueError(
                f"value table {values.shape} does not match "
                f"{len(self.datasets)} datasets x {len(self.classes)} classes"
            )
        if not np.isin(values, VALID_VALUES).all():
            raise ValueError("presence values must be 1, 0 or -1")
        if len(set(self.datasets)) != len(self.datasets) or len(set(self.classes)) != len(self.classes):
            raise ValueError("duplicate dataset or class names")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "_d_index", {d: i for i, d in enumerate(self.datasets)})
        object.__setattr__(self, "_c_index", {c: i for i, c in enumerate(self.classes)})

    @classmethod
    def from_entries(cls, entries: Mapping[tuple[str, str], int], datasets: Sequence[str], classes: Sequence[str]):
        values = np.empty((len(datasets), len(classes)), dtype=np.int8)
        for i, d in enumerate(datasets):
            for j, c in enumerate(classes):
                if (d, c) not in entries:
                    raise ValueError(f"missing entry for ({d!r}, {c!r})")
                values[i, j] = entries[(d, c)]
        return cls(tuple(datasets), tuple(classes), values)

    @classmethod
    def filled(cls, datasets: Sequence[str], classes: Sequence[str], value: int = UNANNOTATED):
        return cls(tuple(datasets), tuple(classes), np.full((len(datasets), len(classes)), value))

    def lookup(self, dataset_id: str, class_name: str) -> int:
        try:
            i = self._d_index[dataset_id]
        except KeyError:
            raise UnknownEntry(f"unknown dataset {dataset_id!r}") from None
        try:
            j = self._c_index[class_name]
        except KeyError:
            raise UnknownEntry(f"unknown class {class_name!r}") from None
        return int(self.values[i, j])

    def with_value(self, dataset_id: str, class_name: str, value: int) -> "PresenceMatrix":
        self.lookup(dataset_id, class_name)
        values = self.values.copy()
        values[self._d_index[dataset_id], self._c_index[class_name]] = value
        return PresenceMatrix(self.datasets, self.classes, values)

    def __eq__(self, other):
        if not isinstance(other, PresenceMatrix):
            return NotImplemented
        return (
            self.datasets == other.datasets
            and self.classes == other.classes
            and np.array_equal(self.values, other.values)
        )

    def __hash__(self):
        return hash((self.datasets, self.classes, self.values.tobytes()))

    # ---- file format

    def dumps(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", *self.classes])
        for d, row in zip(self.datasets, self.values):
            w.writerow([d, *(int(v) for v in row)])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "PresenceMatrix":
        rows = [r for r in csv.reader(io.StringIO(text)) if any(cell.strip() for cell in r)]
        if not rows:
            raise MatrixParseError("empty matrix file")
        header = [c.strip() for c in rows[0]]
        classes = header[1:]
        if not classes:
            raise MatrixParseError("header lists no classes", row=1)
        if any(not c for c in classes):
            raise MatrixParseError("blank class name in header", row=1)
        datasets, values = [], []
        for r, row in enumerate(rows[1:], start=2):
            if len(row) != len(header):
                raise MatrixParseError(f"expected {len(header)} fields, got {len(row)}", row=r)
            datasets.append(row[0].strip())
            parsed = []
            for c, cell in enumerate(row[1:], start=2):
                try:
                    v = int(cell.strip())
                except ValueError:
                    raise MatrixParseError(f"non-integer value {cell!r}", row=r, column=c) from None
                if v not in VALID_VALUES:
                    raise MatrixParseError(f"value {v} not in {{1, 0, -1}}", row=r, column=c)
                parsed.append(v)
            values.append(parsed)
        if not datasets:
            raise MatrixParseError("matrix lists no datasets")
        try:
            return cls(tuple(datasets), tuple(classes), np.array(values, dtype=np.int8))
        except ValueError as exc:
            raise MatrixParseError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "PresenceMatrix":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class Violation:
    dataset_id: str
    class_name: str
    value: int | None
    count: int
    hard: bool
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation]

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def hard(self) -> list[Violation]:
        return [v for v in self.violations if v.hard]

    def lines(self) -> list[str]:
        return [("HARD " if v.hard else "SOFT ") + v.message for v in self.violations]


def validate(matrix: PresenceMatrix, samples: Iterable) -> ValidationReport:
    """Check curated annotations against the matrix.

    Every annotated (dataset, class) must be marked 1. Annotations where the
    matrix says -1, or on unregistered datasets/classes, are hard violations.
    Pseudo-labels are ignored. ``samples`` are ``SliceSample``-like objects
    with ``dataset_id`` and ``annotations``.
    """
    counts: dict[tuple[str, str], int] = {}
    for s in samples:
        for a in s.annotations:
            if a.is_pseudo:
                continue
            key = (s.dataset_id, a.class_name)
            counts[key] = counts.get(key, 0) + 1
    out = []
    for (d, c), n in sorted(counts.items()):
        try:
            v = matrix.lookup(d, c)
        except UnknownEntry as exc:
            out.append(Violation(d, c, None, n, True, f"{exc.args[0]} ({n} annotations in {d})"))
            continue
        if v == IMPOSSIBLE:
            out.append(Violation(d, c, v, n, True, f"{n} annotations of {c!r} in {d!r} where M=-1"))
        elif v == UNANNOTATED:
            out.append(Violation(d, c, v, n, False, f"{c!r} is annotated {n} times in {d!r} but M=0"))
    return ValidationReport(out)


def matrix_from_samples(samples: Iterable, classes: Sequence[str], default: int = UNANNOTATED) -> PresenceMatrix:
    """Matrix with 1 wherever a class is annotated and ``default`` elsewhere."""
    annotated: dict[str, set[str]] = {}
    for s in samples:
        seen = annotated.setdefault(s.dataset_id, set())
        seen.update(a.class_name for a in s.annotations if not a.is_pseudo)
    datasets = sorted(annotated)
    values = np.full((len(datasets), len(classes)), default, dtype=np.int8)
    for i, d in enumerate(datasets):
        for j, c in enumerate(classes):
            if c in annotated[d]:
                values[i, j] = ANNOTATED
    return PresenceMatrix(tuple(datasets), tuple(classes), values)
