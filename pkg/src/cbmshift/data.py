"""Vocabularies, sample containers and CSV ingestion/export.

Two CSV layouts are supported:

* samples:     ``sample_id,split,class,x_0..x_{d-1},c_0..c_{L-1}``
* activations: ``sample_id,split,class,a_0..a_{L-1}``

The feature block and the concept block of the samples file are each
optional, but at least one must be present. Real numbers are written with
nine fractional digits.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPLITS = ("train", "val", "test")
ACTIVATION_TOLERANCE = 1e-9


class FormatError(ValueError):
    """Malformed input file. ``row`` is the 1-based data row, if known."""

    def __init__(self, message: str, path: str | Path | None = None, row: int | None = None):
        self.path = None if path is None else str(path)
        self.row = row
        prefix = ""
        if self.path is not None:
            prefix = f"{self.path}: "
        if row is not None:
            # header is line 1, so data row r sits on line r + 1
            prefix += f"row {row} (line {row + 1}): "
        super().__init__(prefix + message)


def format_real(value: float) -> str:
    return f"{float(value):.9f}"


def _read_only(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class _Vocabulary:
    names: tuple[str, ...]

    _min_size = 1

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        object.__setattr__(self, "names", names)
        if len(names) < self._min_size:
            raise ValueError(
                f"{type(self).__name__} needs at least {self._min_size} name(s), got {len(names)}"
            )
        seen = set()
        for name in names:
            if not name or name != name.strip():
                raise ValueError(f"invalid vocabulary entry {name!r}")
            if name in seen:
                raise ValueError(f"duplicate vocabulary entry {name!r}")
            seen.add(name)
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(names)})

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __contains__(self, name) -> bool:
        return name in self._index

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"{name!r} is not in the {type(self).__name__}") from None

    @classmethod
    def load(cls, path: str | Path):
        """One name per line; blank lines are ignored."""
        with open(path, encoding="utf-8") as fh:
            names = [line.strip() for line in fh if line.strip()]
        return cls(tuple(names))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for name in self.names:
                fh.write(name + "\n")


class ConceptVocabulary(_Vocabulary):
    """Ordered concept names; position ``i`` is concept index ``i``."""

    _min_size = 1


class ClassVocabulary(_Vocabulary):
    _min_size = 2


@dataclass(frozen=True)
class Sample:
    sample_id: str
    class_label: int
    features: np.ndarray | None = None
    concept_labels: np.ndarray | None = None
    split: str = "train"

    def __post_init__(self):
        if self.features is None and self.concept_labels is None:
            raise ValueError(f"sample {self.sample_id!r} has neither features nor concept labels")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.features is not None:
            feats = _read_only(self.features)
            if feats.ndim != 1 or not np.all(np.isfinite(feats)):
                raise ValueError(f"sample {self.sample_id!r}: features must be a finite vector")
            object.__setattr__(self, "features", feats)
        if self.concept_labels is not None:
            labels = _read_only(self.concept_labels)
            if labels.ndim != 1 or not np.all((labels == 0) | (labels == 1)):
                raise ValueError(f"sample {self.sample_id!r}: concept labels must be binary")
            object.__setattr__(self, "concept_labels", labels)
        object.__setattr__(self, "class_label", int(self.class_label))


@dataclass(frozen=True)
class ActivationRecord:
    sample_id: str
    activations: np.ndarray
    class_label: int
    split: str = "val"

    def __post_init__(self):
        acts = _read_only(self.activations)
        if acts.ndim != 1 or acts.size == 0:
            raise ValueError(f"record {self.sample_id!r}: activations must be a non-empty vector")
        if not np.all(np.isfinite(acts)) or acts.min() < 0.0 or acts.max() > 1.0:
            raise ValueError(f"record {self.sample_id!r}: activations must lie in [0, 1]")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        object.__setattr__(self, "activations", acts)
        object.__setattr__(self, "class_label", int(self.class_label))

    def __eq__(self, other):
        if not isinstance(other, ActivationRecord):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.class_label == other.class_label
            and self.split == other.split
            and np.array_equal(self.activations, other.activations)
        )

    __hash__ = None


@dataclass(frozen=True)
class SplitDataset:
    """Samples in file order, each tagged with its split.

    Every class must have at least one sample in every split that occurs.
    """

    samples: tuple[Sample, ...]
    concepts: ConceptVocabulary
    classes: ClassVocabulary
    _by_split: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        samples = tuple(self.samples)
        object.__setattr__(self, "samples", samples)
        K = len(self.classes)
        L = len(self.concepts)
        dims = {s.features.shape[0] for s in samples if s.features is not None}
        if len(dims) > 1:
            raise ValueError(f"inconsistent feature lengths {sorted(dims)}")
        by_split: dict[str, list[Sample]] = {}
        for s in samples:
            if not 0 <= s.class_label < K:
                raise ValueError(f"sample {s.sample_id!r}: class label {s.class_label} outside [0, {K})")
            if s.concept_labels is not None and s.concept_labels.shape[0] != L:
                raise ValueError(
                    f"sample {s.sample_id!r}: {s.concept_labels.shape[0]} concept labels, expected {L}"
                )
            by_split.setdefault(s.split, []).append(s)
        for split, members in by_split.items():
            present = {s.class_label for s in members}
            missing = [self.classes.names[k] for k in range(K) if k not in present]
            if missing:
                raise ValueError(f"split {split!r} has no samples of class(es) {', '.join(missing)}")
        object.__setattr__(self, "_by_split", {k: tuple(v) for k, v in by_split.items()})

    @property
    def n_features(self) -> int | None:
        for s in self.samples:
            if s.features is not None:
                return s.features.shape[0]
        return None

    @property
    def splits(self) -> tuple[str, ...]:
        return tuple(s for s in SPLITS if s in self._by_split)

    def split(self, name: str) -> tuple[Sample, ...]:
        return self._by_split.get(name, ())

    def features(self, split: str) -> np.ndarray:
        members = self.split(split)
        if any(s.features is None for s in members):
            raise ValueError(f"split {split!r} contains samples without features")
        return np.array([s.features for s in members]).reshape(len(members), -1)

    def concept_labels(self, split: str) -> np.ndarray:
        members = self.split(split)
        if any(s.concept_labels is None for s in members):
            raise ValueError(f"split {split!r} contains samples without concept labels")
        return np.array([s.concept_labels for s in members]).reshape(len(members), len(self.concepts))

    def labels(self, split: str) -> np.ndarray:
        return np.array([s.class_label for s in self.split(split)], dtype=int)


# --------------------------------------------------------------------------
# CSV parsing


def _indexed_block(header: Sequence[str], prefix: str) -> list[int]:
    """Positions of ``prefix_<n>`` columns, checked to be contiguous and 0-based."""
    pattern = re.compile(rf"{re.escape(prefix)}_(\d+)$")
    positions, indices = [], []
    for pos, name in enumerate(header):
        m = pattern.match(name)
        if m:
            positions.append(pos)
            indices.append(int(m.group(1)))
    if indices != list(range(len(indices))):
        raise FormatError(f"columns {prefix}_* must be {prefix}_0..{prefix}_{len(indices) - 1} in order")
    if positions and positions != list(range(positions[0], positions[0] + len(positions))):
        raise FormatError(f"columns {prefix}_* must be adjacent")
    return positions


def _check_fixed_columns(header: Sequence[str], path) -> None:
    expected = ["sample_id", "split", "class"]
    if list(header[:3]) != expected:
        raise FormatError(f"header must begin with {','.join(expected)}, got {','.join(header[:3])}", path)


def _parse_real(cell: str, column: str, path, row: int) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise FormatError(f"non-numeric value {cell!r} in column {column}", path, row) from None
    if not math.isfinite(value):
        raise FormatError(f"non-finite value {cell!r} in column {column}", path, row)
    return value


def _parse_common(cells, header, classes: ClassVocabulary, path, row):
    if len(cells) != len(header):
        raise FormatError(f"expected {len(header)} columns, found {len(cells)}", path, row)
    sample_id, split, class_name = cells[0], cells[1], cells[2]
    if split not in SPLITS:
        raise FormatError(f"split {split!r} is not one of {', '.join(SPLITS)}", path, row)
    if class_name not in classes:
        raise FormatError(f"unknown class name {class_name!r}", path, row)
    return sample_id, split, classes.index(class_name)


def _open_rows(path):
    fh = open(path, newline="", encoding="utf-8")
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        fh.close()
        raise FormatError("file is empty (missing header)", path) from None
    return fh, header, reader


def load_samples_csv(
    path: str | Path, concept_vocab: ConceptVocabulary, class_vocab: ClassVocabulary
) -> SplitDataset:
    fh, header, reader = _open_rows(path)
    with fh:
        _check_fixed_columns(header, path)
        try:
            x_pos = _indexed_block(header, "x")
            c_pos = _indexed_block(header, "c")
        except FormatError as exc:
            raise FormatError(str(exc), path) from None
        L = len(concept_vocab)
        if not x_pos and not c_pos:
            raise FormatError("header has neither x_* feature columns nor c_* concept columns", path)
        if c_pos and len(c_pos) != L:
            if len(c_pos) < L:
                missing = ", ".join(f"c_{i}" for i in range(len(c_pos), L))
                raise FormatError(f"missing concept column(s) {missing} (vocabulary has {L} concepts)", path)
            raise FormatError(f"{len(c_pos)} concept columns but vocabulary has {L} concepts", path)
        known = {0, 1, 2, *x_pos, *c_pos}
        extra = [header[i] for i in range(len(header)) if i not in known]
        if extra:
            raise FormatError(f"unexpected column(s) {', '.join(extra)}", path)

        samples = []
        for row, cells in enumerate(reader, start=1):
            if not cells:
                continue
            sample_id, split, label = _parse_common(cells, header, class_vocab, path, row)
            features = concepts = None
            if x_pos:
                features = np.array([_parse_real(cells[p], header[p], path, row) for p in x_pos])
            if c_pos:
                concepts = np.array([_parse_real(cells[p], header[p], path, row) for p in c_pos])
                bad = [header[p] for p, v in zip(c_pos, concepts) if v not in (0.0, 1.0)]
                if bad:
                    raise FormatError(f"concept label(s) must be 0 or 1 in column(s) {', '.join(bad)}", path, row)
            samples.append(Sample(sample_id, label, features, concepts, split))
    try:
        return SplitDataset(tuple(samples), concept_vocab, class_vocab)
    except ValueError as exc:
        raise FormatError(str(exc), path) from None


def write_samples_csv(dataset: SplitDataset, path: str | Path) -> None:
    samples = dataset.samples
    has_x = bool(samples) and all(s.features is not None for s in samples)
    has_c = bool(samples) and all(s.concept_labels is not None for s in samples)
    if not samples:
        has_x, has_c = False, True
    d = dataset.n_features if has_x else 0
    header = ["sample_id", "split", "class"]
    header += [f"x_{j}" for j in range(d)]
    if has_c:
        header += [f"c_{i}" for i in range(len(dataset.concepts))]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for s in samples:
            cells = [s.sample_id, s.split, dataset.classes.names[s.class_label]]
            if has_x:
                cells += [format_real(v) for v in s.features]
            if has_c:
                cells += [str(int(v)) for v in s.concept_labels]
            writer.writerow(cells)


def load_activations_csv(
    path: str | Path, concept_vocab: ConceptVocabulary, class_vocab: ClassVocabulary
) -> list[ActivationRecord]:
    fh, header, reader = _open_rows(path)
    with fh:
        _check_fixed_columns(header, path)
        L = len(concept_vocab)
        expected = [f"a_{i}" for i in range(L)]
        block = list(header[3:])
        if block != expected:
            missing = [c for c in expected if c not in block]
            if missing:
                raise FormatError(f"missing activation column(s) {', '.join(missing)}", path)
            raise FormatError(f"activation columns must be exactly a_0..a_{L - 1}", path)

        records = []
        for row, cells in enumerate(reader, start=1):
            if not cells:
                continue
            sample_id, split, label = _parse_common(cells, header, class_vocab, path, row)
            values = []
            for i, cell in enumerate(cells[3:]):
                v = _parse_real(cell, header[3 + i], path, row)
                if v < -ACTIVATION_TOLERANCE or v > 1.0 + ACTIVATION_TOLERANCE:
                    raise FormatError(
                        f"activation {cell} for concept {concept_vocab.names[i]!r} ({header[3 + i]}) "
                        "is outside [0, 1]",
                        path,
                        row,
                    )
                values.append(min(max(v, 0.0), 1.0))
            records.append(ActivationRecord(sample_id, np.array(values), label, split))
    return records


def write_activations_csv(
    records: Iterable[ActivationRecord], path: str | Path, class_vocab: ClassVocabulary, n_concepts: int | None = None
) -> None:
    """Write activation records; ``n_concepts`` sets the header width for an empty list."""
    records = list(records)
    widths = {r.activations.shape[0] for r in records}
    if len(widths) > 1:
        raise ValueError(f"records have differing concept counts {sorted(widths)}")
    L = widths.pop() if widths else n_concepts
    if L is None:
        raise ValueError("n_concepts is required to write an empty activation file")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "split", "class", *[f"a_{i}" for i in range(L)]])
        for r in records:
            writer.writerow(
                [r.sample_id, r.split, class_vocab.names[r.class_label], *[format_real(v) for v in r.activations]]
            )
