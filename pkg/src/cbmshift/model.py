"""The concept bottleneck model: predictor ``g``, classifier ``f`` and the joint loss.

``g`` is a one-hidden-layer ReLU network mapping a feature vector to ``L``
sigmoid concept activations; ``f`` is a linear layer from the concept
activations to ``K`` class logits. All functions accept a single feature
vector or a batch (rows are samples). Batched losses and gradients are means
over the batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit, log_softmax

PARAMS_VERSION = "cbm-params-v1"
PROB_EPS = 1e-12

# (name, shape key) in serialization order
_LAYOUT = (
    ("g_hidden_weights", ("d", "H")),
    ("g_hidden_bias", ("H",)),
    ("g_out_weights", ("H", "L")),
    ("g_out_bias", ("L",)),
    ("f_weights", ("L", "K")),
    ("f_bias", ("K",)),
)
FIELD_NAMES = tuple(name for name, _ in _LAYOUT)


@dataclass(frozen=True)
class Dims:
    d: int
    H: int
    L: int
    K: int

    def __iter__(self):
        return iter((self.d, self.H, self.L, self.K))


@dataclass(frozen=True, eq=False)
class CbmParameters:
    g_hidden_weights: np.ndarray  # (d, H)
    g_hidden_bias: np.ndarray  # (H,)
    g_out_weights: np.ndarray  # (H, L)
    g_out_bias: np.ndarray  # (L,)
    f_weights: np.ndarray  # (L, K)
    f_bias: np.ndarray  # (K,)

    def __post_init__(self):
        for name in FIELD_NAMES:
            arr = np.array(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        d, H = self.g_hidden_weights.shape
        L = self.g_out_weights.shape[1]
        K = self.f_weights.shape[1]
        sizes = {"d": d, "H": H, "L": L, "K": K}
        for name, key in _LAYOUT:
            expected = tuple(sizes[k] for k in key)
            if getattr(self, name).shape != expected:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {expected}")

    @property
    def dims(self) -> Dims:
        d, H = self.g_hidden_weights.shape
        return Dims(d, H, self.g_out_weights.shape[1], self.f_weights.shape[1])

    def arrays(self) -> tuple[np.ndarray, ...]:
        return tuple(getattr(self, name) for name in FIELD_NAMES)

    @classmethod
    def from_arrays(cls, arrays) -> "CbmParameters":
        return cls(*arrays)

    @classmethod
    def zeros(cls, dims) -> "CbmParameters":
        d, H, L, K = dims
        return cls(np.zeros((d, H)), np.zeros(H), np.zeros((H, L)), np.zeros(L), np.zeros((L, K)), np.zeros(K))

    @classmethod
    def initialize(cls, dims, rng: np.random.Generator) -> "CbmParameters":
        """Weights ~ U(-sqrt(1/fan_in), +sqrt(1/fan_in)), biases zero."""
        d, H, L, K = dims

        def uniform(fan_in, fan_out):
            bound = np.sqrt(1.0 / fan_in)
            return rng.uniform(-bound, bound, size=(fan_in, fan_out))

        return cls(uniform(d, H), np.zeros(H), uniform(H, L), np.zeros(L), uniform(L, K), np.zeros(K))

    def equals(self, other: "CbmParameters") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))

    def to_json(self) -> dict:
        d, H, L, K = self.dims
        doc = {"version": PARAMS_VERSION, "dims": {"d": d, "H": H, "L": L, "K": K}}
        for name in FIELD_NAMES:
            doc[name] = getattr(self, name).tolist()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "CbmParameters":
        if doc.get("version") != PARAMS_VERSION:
            raise ValueError(f"unsupported parameter version {doc.get('version')!r}, expected {PARAMS_VERSION!r}")
        try:
            sizes = {k: int(doc["dims"][k]) for k in ("d", "H", "L", "K")}
            arrays = []
            for name, key in _LAYOUT:
                arr = np.array(doc[name], dtype=float).reshape(tuple(sizes[k] for k in key))
                arrays.append(arr)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed parameter document: {exc}") from None
        return cls(*arrays)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "CbmParameters":
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_json(doc)


@dataclass(frozen=True)
class LossConfig:
    concept_loss_weight: float = 1.0
    label_smoothing: float = 0.05

    def __post_init__(self):
        if self.concept_loss_weight < 0:
            raise ValueError("concept_loss_weight must be >= 0")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must lie in [0, 1)")


@dataclass(frozen=True)
class ForwardTrace:
    features: np.ndarray
    hidden_pre: np.ndarray
    hidden: np.ndarray
    concept_logits: np.ndarray
    concepts: np.ndarray
    class_logits: np.ndarray
    class_probs: np.ndarray

    @property
    def prediction(self):
        """Argmax class; ties go to the lowest index."""
        return np.argmax(self.class_probs, axis=-1)


def _as_batch(features, d: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(features, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != d:
        raise ValueError(f"expected feature vectors of length {d}, got shape {np.shape(features)}")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")
    return x, single


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def classify(params: CbmParameters, concepts) -> tuple[np.ndarray, np.ndarray]:
    """Apply ``f`` to concept vectors (possibly masked, so not limited to [0, 1])."""
    c = np.asarray(concepts, dtype=float)
    logits = c @ params.f_weights + params.f_bias
    return logits, softmax(logits)


def forward(params: CbmParameters, features) -> ForwardTrace:
    x, single = _as_batch(features, params.dims.d)
    hidden_pre = x @ params.g_hidden_weights + params.g_hidden_bias
    hidden = np.maximum(hidden_pre, 0.0)
    concept_logits = hidden @ params.g_out_weights + params.g_out_bias
    concepts = expit(concept_logits)
    class_logits, class_probs = classify(params, concepts)
    parts = (x, hidden_pre, hidden, concept_logits, concepts, class_logits, class_probs)
    if single:
        parts = tuple(p[0] for p in parts)
    return ForwardTrace(*parts)


def smoothed_targets(class_labels, K: int, smoothing: float) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(class_labels, dtype=int))
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"class label outside [0, {K})")
    target = np.full((labels.size, K), smoothing / K)
    target[np.arange(labels.size), labels] += 1.0 - smoothing
    return target


def _check_concept_labels(concept_labels, n: int, L: int) -> np.ndarray:
    c = np.asarray(concept_labels, dtype=float).reshape(n, -1)
    if c.shape[1] != L:
        raise ValueError(f"expected {L} concept labels per sample, got {c.shape[1]}")
    if not np.all((c == 0) | (c == 1)):
        raise ValueError("concept labels must be 0 or 1")
    return c


def _loss_terms(trace: ForwardTrace, concept_labels, class_labels, cfg: LossConfig):
    concepts = np.atleast_2d(trace.concepts)
    logits = np.atleast_2d(trace.class_logits)
    n, L = concepts.shape
    K = logits.shape[1]
    target = smoothed_targets(class_labels, K, cfg.label_smoothing)
    if target.shape[0] != n:
        raise ValueError("number of class labels does not match the batch")
    class_loss = -(target * log_softmax(logits, axis=1)).sum(axis=1)
    if cfg.concept_loss_weight == 0 and concept_labels is None:
        return class_loss, np.zeros(n), target, None
    c = _check_concept_labels(concept_labels, n, L)
    p = np.clip(concepts, PROB_EPS, 1.0 - PROB_EPS)
    bce = -(c * np.log(p) + (1.0 - c) * np.log1p(-p))
    return class_loss, bce.mean(axis=1), target, c


def joint_loss(trace: ForwardTrace, concept_labels, class_label, cfg: LossConfig = LossConfig()) -> float:
    """``phi * mean-BCE(concepts) + CE(smoothed target, class probs)``; batch mean for batches.

    ``concept_labels`` may be ``None`` when ``concept_loss_weight`` is 0.
    """
    class_loss, concept_loss, _, _ = _loss_terms(trace, concept_labels, class_label, cfg)
    return float(np.mean(cfg.concept_loss_weight * concept_loss + class_loss))


def loss_and_grad(
    params: CbmParameters, features, concept_labels, class_labels, cfg: LossConfig = LossConfig()
) -> tuple[float, CbmParameters]:
    trace = forward(params, features)
    x = np.atleast_2d(trace.features)
    n = x.shape[0]
    class_loss, concept_loss, target, c = _loss_terms(trace, concept_labels, class_labels, cfg)
    loss = float(np.mean(cfg.concept_loss_weight * concept_loss + class_loss))

    hidden = np.atleast_2d(trace.hidden)
    concepts = np.atleast_2d(trace.concepts)
    L = concepts.shape[1]

    d_logits = (np.atleast_2d(trace.class_probs) - target) / n
    grad_f_w = concepts.T @ d_logits
    grad_f_b = d_logits.sum(axis=0)

    d_concepts = d_logits @ params.f_weights.T
    d_concept_logits = d_concepts * concepts * (1.0 - concepts)
    if c is not None and cfg.concept_loss_weight != 0:
        # clamped probabilities have zero derivative
        active = (concepts > PROB_EPS) & (concepts < 1.0 - PROB_EPS)
        d_concept_logits = d_concept_logits + cfg.concept_loss_weight * (concepts - c) * active / (L * n)

    grad_out_w = hidden.T @ d_concept_logits
    grad_out_b = d_concept_logits.sum(axis=0)
    d_hidden = (d_concept_logits @ params.g_out_weights.T) * (np.atleast_2d(trace.hidden_pre) > 0)
    grad_hid_w = x.T @ d_hidden
    grad_hid_b = d_hidden.sum(axis=0)

    grads = CbmParameters(grad_hid_w, grad_hid_b, grad_out_w, grad_out_b, grad_f_w, grad_f_b)
    return loss, grads


def backward(params: CbmParameters, features, concept_labels, class_label, cfg: LossConfig = LossConfig()) -> CbmParameters:
    """Analytic gradient of :func:`joint_loss` with respect to every parameter."""
    return loss_and_grad(params, features, concept_labels, class_label, cfg)[1]
