"""AdamW, the joint training loop and the image-label-only fine-tuning baseline."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from cbmshift.data import Sample, SplitDataset
from cbmshift.model import CbmParameters, LossConfig, forward, loss_and_grad

logger = logging.getLogger(__name__)

# Offsets into the run seed; see cbmshift.pipeline for the full list.
STREAM_INIT = 10
STREAM_SHUFFLE = 11
STREAM_FINETUNE = 12


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.weight_decay < 0 or self.epsilon <= 0:
            raise ValueError("weight_decay must be >= 0 and epsilon > 0")


@dataclass(frozen=True)
class AdamWState:
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    t: int = 0

    @classmethod
    def fresh(cls, params: CbmParameters) -> "AdamWState":
        zeros = tuple(np.zeros_like(a) for a in params.arrays())
        return cls(zeros, tuple(np.zeros_like(a) for a in params.arrays()), 0)


def adamw_step(
    params: CbmParameters, grads: CbmParameters, state: AdamWState, cfg: TrainConfig
) -> tuple[CbmParameters, AdamWState]:
    """One decoupled-weight-decay Adam update.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
    """
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_params, new_m, new_v = [], [], []
    for theta, g, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        if theta.shape != g.shape or theta.shape != m.shape:
            raise ValueError(f"shape mismatch: parameter {theta.shape}, gradient {g.shape}, moment {m.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        theta = theta - cfg.learning_rate * (m_hat / (np.sqrt(v_hat) + cfg.epsilon) + cfg.weight_decay * theta)
        new_params.append(theta)
        new_m.append(m)
        new_v.append(v)
    out = CbmParameters.from_arrays(new_params)  # raises on NaN/Inf
    return out, AdamWState(tuple(new_m), tuple(new_v), t)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    mean_loss: float
    val_accuracy: float


def accuracy(params: CbmParameters, features: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(forward(params, features).prediction == labels))


def _run_epochs(params, x, c, y, loss_cfg, cfg, rng, val=None):
    state = AdamWState.fresh(params)
    n = x.shape[0]
    log: list[EpochRecord] = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = loss_and_grad(params, x[idx], None if c is None else c[idx], y[idx], loss_cfg)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            params, state = adamw_step(params, grads, state, cfg)
            total += loss * len(idx)
        val_acc = accuracy(params, *val) if val is not None else float("nan")
        log.append(EpochRecord(epoch, total / n, val_acc))
        logger.debug("epoch %d loss %.6f val_acc %.4f", epoch, total / n, val_acc)
    return params, log


def train(
    dataset: SplitDataset,
    dims,
    loss_cfg: LossConfig = LossConfig(),
    train_cfg: TrainConfig = TrainConfig(),
) -> tuple[CbmParameters, list[EpochRecord]]:
    """Jointly fit ``g`` and ``f`` on the train split.

    ``dims`` is ``(d, H, L, K)``; d, L and K must agree with the dataset.
    """
    d, H, L, K = dims
    train_samples = dataset.split("train")
    if not train_samples:
        raise ValueError("train split is empty")
    missing = [s.sample_id for s in train_samples if s.concept_labels is None]
    if missing:
        raise ValueError(f"training samples without concept labels: {', '.join(missing[:5])}")
    if dataset.n_features != d or len(dataset.concepts) != L or len(dataset.classes) != K:
        raise ValueError(
            f"dims {tuple(dims)} do not match dataset (d={dataset.n_features}, "
            f"L={len(dataset.concepts)}, K={len(dataset.classes)})"
        )
    x = dataset.features("train")
    c = dataset.concept_labels("train")
    y = dataset.labels("train")
    val = None
    if dataset.split("val"):
        val = (dataset.features("val"), dataset.labels("val"))

    params = CbmParameters.initialize(dims, np.random.default_rng([train_cfg.seed, STREAM_INIT]))
    rng = np.random.default_rng([train_cfg.seed, STREAM_SHUFFLE])
    return _run_epochs(params, x, c, y, loss_cfg, train_cfg, rng, val)


def fine_tune(
    params: CbmParameters,
    ood_samples: Sequence[Sample],
    loss_cfg: LossConfig = LossConfig(),
    train_cfg: TrainConfig = TrainConfig(),
) -> CbmParameters:
    """Continue training every parameter on image-level labels only.

    The concept term is disabled because target-domain samples carry no
    concept annotations; any concept labels present are ignored.
    """
    if not ood_samples:
        raise ValueError("fine-tuning needs at least one out-of-domain sample")
    if any(s.features is None for s in ood_samples):
        raise ValueError("every fine-tuning sample needs features")
    x = np.array([s.features for s in ood_samples])
    y = np.array([s.class_label for s in ood_samples], dtype=int)
    cfg = replace(loss_cfg, concept_loss_weight=0.0)
    rng = np.random.default_rng([train_cfg.seed, STREAM_FINETUNE])
    tuned, _ = _run_epochs(params, x, None, y, cfg, train_cfg, rng)
    return tuned


def write_training_log(log: Sequence[EpochRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "mean_loss", "val_accuracy"])
        for rec in log:
            writer.writerow([rec.epoch, f"{rec.mean_loss:.9f}", f"{rec.val_accuracy:.9f}"])
