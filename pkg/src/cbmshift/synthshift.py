"""Synthetic in-domain / out-of-domain data with injected concept shifts.

Each class owns a few *signature* concepts (present with probability
``p_high``, absent elsewhere with ``p_low``); remaining *filler* concepts are
shared at ``filler_prob``. Features are a linear image of the concept vector
plus Gaussian noise.

Two kinds of shift are injected into the out-of-domain data:

* misactivated concepts: their evidence no longer follows the concept label,
  it is drawn independently of the class;
* under-activated (class, concept) pairs: the concept's evidence is weakened
  for samples of that class.

Generators exist at two levels. Feature-level generators produce samples that
go through a trained predictor. Activation-level generators produce concept
activations directly, which gives exact control when testing identification.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit, logit

from cbmshift.adaptation import ConfusionReport, OodActivationTable
from cbmshift.data import ActivationRecord, ClassVocabulary, ConceptVocabulary, Sample, SplitDataset
from cbmshift.memory import ConceptMemory

SCENARIO_VERSION = "scenario-v1"

STREAM_SCENARIO = 0
STREAM_ID = 1
STREAM_OOD = 2
STREAM_ID_ACTIVATIONS = 3
STREAM_OOD_ACTIVATIONS = 4


@dataclass(frozen=True, eq=False)
class ShiftScenario:
    concept_probs: np.ndarray  # (K, L)
    feature_map: np.ndarray  # (L, d)
    misactivated: tuple[int, ...] = ()
    under_activated: tuple[tuple[int, int], ...] = ()
    feature_noise: float = 0.1
    activation_noise: float = 0.05
    misactivation_spread: float = 1.0
    under_logit_shift: float = 6.0
    under_feature_scale: float = 0.3
    seed: int = 0

    def __post_init__(self):
        p = np.array(self.concept_probs, dtype=float)
        fmap = np.array(self.feature_map, dtype=float)
        if p.ndim != 2 or fmap.ndim != 2 or fmap.shape[0] != p.shape[1]:
            raise ValueError(f"concept_probs {p.shape} and feature_map {fmap.shape} are inconsistent")
        if p.min() < 0.05 - 1e-12 or p.max() > 0.95 + 1e-12:
            raise ValueError("concept probabilities must lie in [0.05, 0.95]")
        for name, arr in (("concept_probs", p), ("feature_map", fmap)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        mis = tuple(sorted(int(i) for i in self.misactivated))
        under = tuple(sorted((int(k), int(i)) for k, i in self.under_activated))
        object.__setattr__(self, "misactivated", mis)
        object.__setattr__(self, "under_activated", under)
        K, L = p.shape
        if any(not 0 <= i < L for i in mis) or len(set(mis)) != len(mis):
            raise ValueError("misactivated concepts must be distinct indices in [0, L)")
        for k, i in under:
            if not (0 <= k < K and 0 <= i < L):
                raise ValueError(f"under-activated pair {(k, i)} out of range")
            if i in mis:
                raise ValueError(f"concept {i} cannot be both misactivated and under-activated")
            if not p[k, i] > 0.5:
                raise ValueError(f"under-activated pair {(k, i)} needs concept probability > 0.5")

    @property
    def K(self) -> int:
        return self.concept_probs.shape[0]

    @property
    def L(self) -> int:
        return self.concept_probs.shape[1]

    @property
    def d(self) -> int:
        return self.feature_map.shape[1]

    def without_shifts(self) -> "ShiftScenario":
        return replace(self, misactivated=(), under_activated=())

    def concept_vocabulary(self) -> ConceptVocabulary:
        return ConceptVocabulary(tuple(f"concept_{i}" for i in range(self.L)))

    def class_vocabulary(self) -> ClassVocabulary:
        return ClassVocabulary(tuple(f"class_{k}" for k in range(self.K)))

    def to_json(self) -> dict:
        return {
            "version": SCENARIO_VERSION,
            "dims": {"d": self.d, "L": self.L, "K": self.K},
            "concept_probs": self.concept_probs.tolist(),
            "feature_map": self.feature_map.tolist(),
            "misactivated": list(self.misactivated),
            "under_activated": [list(p) for p in self.under_activated],
            "feature_noise": self.feature_noise,
            "activation_noise": self.activation_noise,
            "misactivation_spread": self.misactivation_spread,
            "under_logit_shift": self.under_logit_shift,
            "under_feature_scale": self.under_feature_scale,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ShiftScenario":
        if doc.get("version") != SCENARIO_VERSION:
            raise ValueError(f"unsupported scenario version {doc.get('version')!r}")
        keys = ("feature_noise", "activation_noise", "misactivation_spread", "under_logit_shift", "under_feature_scale")
        try:
            return cls(
                concept_probs=np.array(doc["concept_probs"], dtype=float),
                feature_map=np.array(doc["feature_map"], dtype=float),
                misactivated=tuple(doc.get("misactivated", ())),
                under_activated=tuple(tuple(p) for p in doc.get("under_activated", ())),
                seed=int(doc.get("seed", 0)),
                **{k: float(doc[k]) for k in keys if k in doc},
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed scenario document: {exc}") from None

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "ShiftScenario":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def make_scenario(
    seed: int = 0,
    d: int = 16,
    L: int = 12,
    K: int = 4,
    n_misactivated: int = 2,
    n_under: int = 2,
    signatures_per_class: int = 2,
    p_high: float = 0.95,
    p_low: float = 0.05,
    filler_prob: float = 0.5,
    orthogonal: bool = True,
    **shift_params,
) -> ShiftScenario:
    """Random scenario with ``signatures_per_class`` exclusive concepts per class.

    Concepts not used as signatures are fillers shared by all classes at
    ``filler_prob``. Misactivated concepts are signature concepts of distinct
    classes; under-activated pairs sit on signature concepts of the following
    classes in a random class order, so the two kinds of shift land on
    different classes where possible.
    """
    n_sig = K * signatures_per_class
    if n_sig > L:
        raise ValueError(f"L={L} is too small for {K} classes x {signatures_per_class} signature concepts")
    if n_misactivated + n_under > n_sig:
        raise ValueError("not enough signature concepts for the requested shifts")
    rng = np.random.default_rng([seed, STREAM_SCENARIO])
    order = [int(i) for i in rng.permutation(L)]
    signatures = [order[k * signatures_per_class : (k + 1) * signatures_per_class] for k in range(K)]
    p = np.full((K, L), filler_prob)
    for owner, sig in enumerate(signatures):
        p[:, sig] = p_low
        p[owner, sig] = p_high

    if orthogonal:
        if d < L:
            raise ValueError(f"an orthogonal feature map needs d >= L, got d={d}, L={L}")
        q, _ = np.linalg.qr(rng.standard_normal((d, L)))
        fmap = q.T
    else:
        fmap = rng.standard_normal((L, d))
        fmap /= np.linalg.norm(fmap, axis=1, keepdims=True)

    class_order = [int(k) for k in rng.permutation(K)]
    taken: set[int] = set()

    def pick(start: int) -> tuple[int, int]:
        for step in range(K):
            k = class_order[(start + step) % K]
            free = [i for i in signatures[k] if i not in taken]
            if free:
                taken.add(free[0])
                return k, free[0]
        raise AssertionError("unreachable: signature pool exhausted")

    misactivated = [pick(j)[1] for j in range(n_misactivated)]
    under = [pick(n_misactivated + j) for j in range(n_under)]
    return ShiftScenario(p, fmap, tuple(misactivated), tuple(under), seed=seed, **shift_params)


def _draw_concepts(rng, scenario: ShiftScenario, k: int, n: int) -> np.ndarray:
    return (rng.random((n, scenario.L)) < scenario.concept_probs[k]).astype(float)


def _features(rng, scenario: ShiftScenario, evidence: np.ndarray) -> np.ndarray:
    noise = scenario.feature_noise * rng.standard_normal((evidence.shape[0], scenario.d))
    return evidence @ scenario.feature_map + noise


def generate_id(scenario: ShiftScenario, n_per_class_per_split) -> SplitDataset:
    """``n_per_class_per_split`` maps split name to a per-class count (or is a (train, val, test) triple)."""
    if not isinstance(n_per_class_per_split, dict):
        n_per_class_per_split = dict(zip(("train", "val", "test"), n_per_class_per_split))
    rng = np.random.default_rng([scenario.seed, STREAM_ID])
    samples = []
    for split in ("train", "val", "test"):
        n = int(n_per_class_per_split.get(split, 0))
        if n < 0 or (split in n_per_class_per_split and n < 1):
            raise ValueError(f"count for split {split!r} must be >= 1")
        for k in range(scenario.K):
            c = _draw_concepts(rng, scenario, k, n)
            x = _features(rng, scenario, c)
            samples += [Sample(f"id-{split}-{k}-{j}", k, x[j], c[j], split) for j in range(n)]
    return SplitDataset(tuple(samples), scenario.concept_vocabulary(), scenario.class_vocabulary())


def generate_ood_samples(scenario: ShiftScenario, n_per_class: int, stream: int = 0, split: str = "test") -> list[Sample]:
    """Shifted samples; concept labels keep the true (unobserved) concepts.

    ``stream`` selects an independent draw, e.g. adaptation images vs. test images.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng([scenario.seed, STREAM_OOD, stream])
    mis = list(scenario.misactivated)
    samples = []
    for k in range(scenario.K):
        c = _draw_concepts(rng, scenario, k, n_per_class)
        evidence = c.copy()
        if mis:
            evidence[:, mis] = rng.uniform(0.0, scenario.misactivation_spread, size=(n_per_class, len(mis)))
        for kk, i in scenario.under_activated:
            if kk == k:
                evidence[:, i] *= scenario.under_feature_scale
        x = _features(rng, scenario, evidence)
        samples += [Sample(f"ood-{stream}-{k}-{j}", k, x[j], c[j], split) for j in range(n_per_class)]
    return samples


def generate_id_activation_records(
    scenario: ShiftScenario, n_per_class: int, split: str = "val", stream: int = 0
) -> list[ActivationRecord]:
    """In-domain activations of an idealised predictor: the concept label pulled inward by |noise|."""
    rng = np.random.default_rng([scenario.seed, STREAM_ID_ACTIVATIONS, stream])
    records = []
    for k in range(scenario.K):
        c = _draw_concepts(rng, scenario, k, n_per_class)
        jitter = np.abs(scenario.activation_noise * rng.standard_normal(c.shape))
        acts = np.clip(c + (1.0 - 2.0 * c) * jitter, 0.0, 1.0)
        records += [ActivationRecord(f"act-{split}-{k}-{j}", acts[j], k, split) for j in range(n_per_class)]
    return records


def generate_ood_activation_table(
    scenario: ShiftScenario, memory: ConceptMemory, n_per_class: int, stream: int = 0
) -> OodActivationTable:
    """OOD activations drawn around the memory, with the injected shifts."""
    if (memory.K, memory.L) != (scenario.K, scenario.L):
        raise ValueError("memory dimensions do not match the scenario")
    rng = np.random.default_rng([scenario.seed, STREAM_OOD_ACTIVATIONS, stream])
    eps = 1e-6
    per_class = []
    for k in range(scenario.K):
        acts = rng.normal(memory.means[k], memory.stds[k], size=(n_per_class, scenario.L))
        for i in scenario.misactivated:
            acts[:, i] = rng.uniform(0.0, 1.0, size=n_per_class)
        for kk, i in scenario.under_activated:
            if kk == k:
                centre = expit(logit(np.clip(memory.means[k, i], eps, 1 - eps)) - scenario.under_logit_shift)
                acts[:, i] = centre + scenario.activation_noise * rng.standard_normal(n_per_class)
        per_class.append(np.clip(acts, 0.0, 1.0))
    return OodActivationTable(tuple(per_class), scenario.L)


def oracle_consistent(scenario: ShiftScenario, memory: ConceptMemory, threshold: float = 0.5) -> bool:
    """Every injected under-activated pair is discriminative in the built memory."""
    return all(memory.means[k, i] > threshold for k, i in scenario.under_activated)


def _precision_recall(predicted: set, truth: set) -> tuple[float, float]:
    hits = len(predicted & truth)
    if predicted:
        precision = hits / len(predicted)
    else:
        precision = 1.0 if not truth else 0.0
    recall = hits / len(truth) if truth else 1.0
    return precision, recall


def recovery_scores(report: ConfusionReport, scenario: ShiftScenario) -> dict[str, float]:
    """Precision/recall of the identified sets against the injected shifts."""
    mis_p, mis_r = _precision_recall(set(report.misactivated), set(scenario.misactivated))
    predicted_pairs = {(k, i) for k, u in enumerate(report.under_activated) for i in u}
    und_p, und_r = _precision_recall(predicted_pairs, set(scenario.under_activated))
    return {
        "misactivated_precision": mis_p,
        "misactivated_recall": mis_r,
        "under_activated_precision": und_p,
        "under_activated_recall": und_r,
    }


def samples_dataset(samples: Sequence[Sample], scenario: ShiftScenario) -> SplitDataset:
    return SplitDataset(tuple(samples), scenario.concept_vocabulary(), scenario.class_vocabulary())
