"""Per-class concept activation memory built from validation activations."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from cbmshift.data import ActivationRecord

MEMORY_VERSION = "memory-v1"


@dataclass(frozen=True, eq=False)
class ConceptMemory:
    """``means[k, i]`` and ``stds[k, i]`` of concept ``i`` over class-``k`` validation samples.

    Standard deviations are population values (divide by the count).
    """

    means: np.ndarray
    stds: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        means = np.array(self.means, dtype=float)
        stds = np.array(self.stds, dtype=float)
        counts = np.array(self.counts, dtype=int)
        if means.ndim != 2 or stds.shape != means.shape or counts.shape != (means.shape[0],):
            raise ValueError(f"inconsistent memory shapes {means.shape}, {stds.shape}, {counts.shape}")
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(stds))):
            raise ValueError("memory contains non-finite values")
        if means.min() < 0 or means.max() > 1 or stds.min() < 0 or counts.min() < 1:
            raise ValueError("memory means must lie in [0, 1], stds >= 0 and counts >= 1")
        for name, arr in (("means", means), ("stds", stds), ("counts", counts)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def L(self) -> int:
        return self.means.shape[1]

    def allclose(self, other: "ConceptMemory", atol: float = 1e-12) -> bool:
        return (
            self.means.shape == other.means.shape
            and np.allclose(self.means, other.means, rtol=0, atol=atol)
            and np.allclose(self.stds, other.stds, rtol=0, atol=atol)
            and np.array_equal(self.counts, other.counts)
        )

    def to_json(self) -> dict:
        return {
            "version": MEMORY_VERSION,
            "K": self.K,
            "L": self.L,
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
            "counts": self.counts.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict, K: int | None = None, L: int | None = None) -> "ConceptMemory":
        if not isinstance(doc, dict) or doc.get("version") != MEMORY_VERSION:
            found = doc.get("version") if isinstance(doc, dict) else None
            raise ValueError(f"unsupported memory version {found!r}, expected {MEMORY_VERSION!r}")
        try:
            mem = cls(np.array(doc["means"], dtype=float), np.array(doc["stds"], dtype=float), np.array(doc["counts"]))
            declared = (int(doc["K"]), int(doc["L"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed memory document: {exc}") from None
        if declared != (mem.K, mem.L):
            raise ValueError(f"memory declares K={declared[0]}, L={declared[1]} but holds {mem.K}x{mem.L}")
        if K is not None and mem.K != K:
            raise ValueError(f"memory has K={mem.K}, expected {K}")
        if L is not None and mem.L != L:
            raise ValueError(f"memory has L={mem.L}, expected {L}")
        return mem


def build_memory(
    records: Iterable[ActivationRecord], K: int, L: int, splits: Sequence[str] = ("val",)
) -> ConceptMemory:
    records = [r for r in records if r.split in splits]
    means = np.zeros((K, L))
    stds = np.zeros((K, L))
    counts = np.zeros(K, dtype=int)
    by_class: list[list[np.ndarray]] = [[] for _ in range(K)]
    for r in records:
        if r.activations.shape != (L,):
            raise ValueError(f"record {r.sample_id!r} has {r.activations.shape[0]} activations, expected {L}")
        if not 0 <= r.class_label < K:
            raise ValueError(f"record {r.sample_id!r} has class label {r.class_label} outside [0, {K})")
        by_class[r.class_label].append(r.activations)
    for k, rows in enumerate(by_class):
        if not rows:
            raise ValueError(f"class {k} has no records in split(s) {', '.join(splits)}")
        # sorting makes the float sums independent of record order
        a = np.sort(np.array(rows), axis=0)
        means[k] = a.mean(axis=0)
        stds[k] = a.std(axis=0)
        counts[k] = len(rows)
    return ConceptMemory(np.clip(means, 0.0, 1.0), stds, counts)


def save_memory(memory: ConceptMemory, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(memory.to_json(), fh)
        fh.write("\n")


def load_memory(path: str | Path, K: int | None = None, L: int | None = None) -> ConceptMemory:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON ({exc})") from None
    return ConceptMemory.from_json(doc, K=K, L=L)
