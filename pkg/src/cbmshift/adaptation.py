"""Confusion concept identification and masked inference.

A concept ``i`` is *confusing* for class ``k`` when the population standard
deviation of ``{mean_ID(k, i)} + {OOD activations of class k on i}`` reaches
``tau * std_ID(k, i)``. Concepts confusing for more than half of all classes
are misactivated and masked to zero; the remaining confusing concepts whose
in-domain mean exceeds the discriminative threshold are amplified. One mask is
shared by every test input.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from cbmshift.data import ActivationRecord, Sample
from cbmshift.memory import ConceptMemory
from cbmshift.model import CbmParameters, classify, forward

MASK_VERSION = "mask-v1"
TAU_PRESETS = {"skin": 1.4, "wbc": 1.1}


@dataclass(frozen=True)
class OodActivationTable:
    """Per-class ``(N_k, L)`` arrays of out-of-domain concept activations."""

    per_class: tuple[np.ndarray, ...]
    L: int

    def __post_init__(self):
        rows = []
        for k, a in enumerate(self.per_class):
            a = np.array(a, dtype=float).reshape(-1, self.L)
            if a.size and (not np.all(np.isfinite(a)) or a.min() < 0 or a.max() > 1):
                raise ValueError(f"class {k}: OOD activations must lie in [0, 1]")
            a.setflags(write=False)
            rows.append(a)
        object.__setattr__(self, "per_class", tuple(rows))

    @property
    def K(self) -> int:
        return len(self.per_class)

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(a.shape[0] for a in self.per_class)

    @classmethod
    def from_rows(cls, activations, labels, K: int, L: int) -> "OodActivationTable":
        activations = np.asarray(activations, dtype=float).reshape(-1, L)
        labels = np.asarray(labels, dtype=int)
        if labels.size and (labels.min() < 0 or labels.max() >= K):
            raise ValueError(f"class label outside [0, {K})")
        return cls(tuple(activations[labels == k] for k in range(K)), L)

    @classmethod
    def from_records(cls, records: Iterable[ActivationRecord], K: int, L: int) -> "OodActivationTable":
        records = list(records)
        acts = np.array([r.activations for r in records]).reshape(len(records), L)
        return cls.from_rows(acts, [r.class_label for r in records], K, L)

    def equals(self, other: "OodActivationTable", atol: float = 0.0) -> bool:
        return self.L == other.L and self.K == other.K and all(
            a.shape == b.shape and np.allclose(a, b, rtol=0, atol=atol) for a, b in zip(self.per_class, other.per_class)
        )


def collect_ood_activations(params: CbmParameters, ood_samples: Sequence[Sample], K: int) -> OodActivationTable:
    """One forward pass per sample, grouped by class label."""
    L = params.dims.L
    if not ood_samples:
        return OodActivationTable(tuple(np.zeros((0, L)) for _ in range(K)), L)
    if any(s.features is None for s in ood_samples):
        raise ValueError("every OOD sample needs features")
    x = np.array([s.features for s in ood_samples])
    acts = forward(params, x).concepts
    return OodActivationTable.from_rows(acts, [s.class_label for s in ood_samples], K, L)


@dataclass(frozen=True)
class IdentificationConfig:
    tau: float = 1.4
    sigma_floor: float = 1e-6
    discriminative_threshold: float = 0.5
    amplification_factor: float = 2.0

    def __post_init__(self):
        if not self.tau > 1:
            raise ValueError("tau must be > 1")
        if not self.amplification_factor > 1:
            raise ValueError("amplification_factor must be > 1")
        if not self.sigma_floor > 0:
            raise ValueError("sigma_floor must be > 0")

    @classmethod
    def preset(cls, name: str, **overrides) -> "IdentificationConfig":
        try:
            tau = TAU_PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {', '.join(TAU_PRESETS)}") from None
        return cls(tau=tau, **overrides)


@dataclass(frozen=True, eq=False)
class ConfusionReport:
    confusion: tuple[frozenset, ...]
    misactivated: frozenset
    under_activated: tuple[frozenset, ...]
    concat_std: np.ndarray  # (K, L), NaN for skipped classes
    threshold: np.ndarray  # (K, L)
    skipped_classes: tuple[int, ...] = field(default=())

    @property
    def K(self) -> int:
        return len(self.confusion)

    @property
    def L(self) -> int:
        return self.concat_std.shape[1]

    @property
    def amplified(self) -> frozenset:
        return frozenset().union(*self.under_activated)

    @property
    def is_empty(self) -> bool:
        return not self.misactivated and not self.amplified


def concat_std(id_mean: float, ood_values) -> float:
    """Population std of the ID mean together with the OOD values."""
    values = np.concatenate([[id_mean], np.asarray(ood_values, dtype=float)])
    return float(np.std(values))


def identify_confusion(
    memory: ConceptMemory, ood: OodActivationTable, cfg: IdentificationConfig = IdentificationConfig()
) -> ConfusionReport:
    if (memory.K, memory.L) != (ood.K, ood.L):
        raise ValueError(f"memory is {memory.K}x{memory.L} but the OOD table is {ood.K}x{ood.L}")
    K, L = memory.K, memory.L
    stds = np.full((K, L), np.nan)
    thresholds = cfg.tau * np.maximum(memory.stds, cfg.sigma_floor)
    confusion, skipped = [], []
    for k in range(K):
        ood_k = ood.per_class[k]
        if ood_k.shape[0] == 0:
            skipped.append(k)
            confusion.append(frozenset())
            continue
        # sorted so the result does not depend on sample order
        values = np.sort(np.vstack([memory.means[k], ood_k]), axis=0)
        stds[k] = values.std(axis=0)
        confusion.append(frozenset(int(i) for i in np.flatnonzero(stds[k] >= thresholds[k])))

    votes = np.zeros(L, dtype=int)
    for conf in confusion:
        for i in conf:
            votes[i] += 1
    misactivated = frozenset(int(i) for i in np.flatnonzero(votes > K / 2))
    under = tuple(
        frozenset(i for i in conf - misactivated if memory.means[k, i] > cfg.discriminative_threshold)
        for k, conf in enumerate(confusion)
    )
    return ConfusionReport(tuple(confusion), misactivated, under, stds, thresholds, tuple(skipped))


@dataclass(frozen=True, eq=False)
class ConceptMask:
    m: np.ndarray
    report: ConfusionReport | None = None
    amplification_factor: float = 2.0

    def __post_init__(self):
        m = np.array(self.m, dtype=float)
        allowed = (m == 0) | (m == 1) | (m == self.amplification_factor)
        if m.ndim != 1 or not np.all(allowed):
            raise ValueError(f"mask entries must be 0, 1 or {self.amplification_factor}")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @property
    def L(self) -> int:
        return self.m.shape[0]

    @property
    def is_identity(self) -> bool:
        return bool(np.all(self.m == 1))

    @classmethod
    def identity(cls, L: int) -> "ConceptMask":
        return cls(np.ones(L))

    def to_json(self, class_names: Sequence[str] | None = None, concept_names: Sequence[str] | None = None) -> dict:
        doc = {"version": MASK_VERSION, "m": self.m.tolist(), "amplification_factor": self.amplification_factor}
        rep = self.report
        if rep is None:
            doc.update(misactivated=[], under_activated={}, diagnostics=[])
            return doc
        names = list(class_names) if class_names is not None else [str(k) for k in range(rep.K)]
        doc["misactivated"] = sorted(rep.misactivated)
        doc["under_activated"] = {names[k]: sorted(u) for k, u in enumerate(rep.under_activated)}
        doc["confusion"] = {names[k]: sorted(c) for k, c in enumerate(rep.confusion)}
        doc["skipped_classes"] = [names[k] for k in rep.skipped_classes]
        if concept_names is not None:
            doc["concept_names"] = list(concept_names)
        doc["diagnostics"] = [
            {
                "class": names[k],
                "concept": i,
                "concat_std": None if np.isnan(rep.concat_std[k, i]) else float(rep.concat_std[k, i]),
                "threshold": float(rep.threshold[k, i]),
                "confusing": i in rep.confusion[k],
            }
            for k in range(rep.K)
            for i in range(rep.L)
        ]
        return doc

    @classmethod
    def from_json(cls, doc: dict, L: int | None = None) -> "ConceptMask":
        if not isinstance(doc, dict) or doc.get("version") != MASK_VERSION:
            raise ValueError(f"unsupported mask document, expected version {MASK_VERSION!r}")
        try:
            mask = cls(np.array(doc["m"], dtype=float), None, float(doc.get("amplification_factor", 2.0)))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed mask document: {exc}") from None
        if L is not None and mask.L != L:
            raise ValueError(f"mask has length {mask.L}, expected {L}")
        return mask

    def save(self, path: str | Path, class_names=None, concept_names=None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(class_names, concept_names), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path, L: int | None = None) -> "ConceptMask":
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_json(doc, L)


def build_mask(report: ConfusionReport, cfg: IdentificationConfig = IdentificationConfig(), L: int | None = None) -> ConceptMask:
    L = report.L if L is None else L
    amplified = report.amplified
    for i in report.misactivated | amplified:
        if not 0 <= i < L:
            raise IndexError(f"concept index {i} outside [0, {L})")
    assert not (report.misactivated & amplified), "misactivated and under-activated sets overlap"
    m = np.ones(L)
    m[sorted(amplified)] = cfg.amplification_factor
    m[sorted(report.misactivated)] = 0.0
    return ConceptMask(m, report, cfg.amplification_factor)


def apply_mask(mask: ConceptMask, concepts) -> np.ndarray:
    c = np.asarray(concepts, dtype=float)
    if c.shape[-1] != mask.L:
        raise ValueError(f"mask has length {mask.L} but concept vectors have length {c.shape[-1]}")
    return c * mask.m


def masked_classify(params: CbmParameters, concepts, mask: ConceptMask):
    """Classifier on ``mask * concepts`` for precomputed activations (e.g. from a CSV)."""
    masked = apply_mask(mask, concepts)
    _, probs = classify(params, masked)
    return np.argmax(probs, axis=-1), probs, masked


def masked_predict(params: CbmParameters, features, mask: ConceptMask):
    """Returns ``(class index, class probabilities, masked concept vector)``."""
    return masked_classify(params, forward(params, features).concepts, mask)
