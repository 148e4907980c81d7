"""Accuracy / macro-F1 metrics and before-after comparisons."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class EvalResult:
    accuracy: float
    macro_f1: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    confusion_matrix: np.ndarray  # rows: true class, columns: predicted
    n_samples: int

    @property
    def K(self) -> int:
        return self.confusion_matrix.shape[0]

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class": {
                "precision": self.precision.tolist(),
                "recall": self.recall.tolist(),
                "f1": self.f1.tolist(),
            },
            "confusion_matrix": self.confusion_matrix.tolist(),
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "EvalResult":
        pc = doc["per_class"]
        return cls(
            float(doc["accuracy"]),
            float(doc["macro_f1"]),
            np.array(pc["precision"], dtype=float),
            np.array(pc["recall"], dtype=float),
            np.array(pc["f1"], dtype=float),
            np.array(doc["confusion_matrix"], dtype=int),
            int(doc["n_samples"]),
        )


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=float)
    np.divide(num, den, out=out, where=den > 0)
    return out


def evaluate(predictions, labels, K: int) -> EvalResult:
    """Exact-match accuracy and unweighted macro-F1; undefined P/R/F1 count as 0."""
    preds = np.asarray(predictions, dtype=int).ravel()
    truth = np.asarray(labels, dtype=int).ravel()
    if preds.shape != truth.shape:
        raise ValueError(f"{preds.size} predictions but {truth.size} labels")
    if preds.size == 0:
        raise ValueError("cannot evaluate an empty prediction set")
    for name, arr in (("prediction", preds), ("label", truth)):
        if arr.min() < 0 or arr.max() >= K:
            raise ValueError(f"{name} outside [0, {K})")
    cm = np.zeros((K, K), dtype=int)
    np.add.at(cm, (truth, preds), 1)
    tp = np.diag(cm).astype(float)
    precision = _safe_ratio(tp, cm.sum(axis=0).astype(float))
    recall = _safe_ratio(tp, cm.sum(axis=1).astype(float))
    f1 = _safe_ratio(2 * precision * recall, precision + recall)
    return EvalResult(
        accuracy=float(tp.sum() / preds.size),
        macro_f1=float(f1.mean()),
        precision=precision,
        recall=recall,
        f1=f1,
        confusion_matrix=cm,
        n_samples=int(preds.size),
    )


@dataclass(frozen=True)
class Comparison:
    before_accuracy: float
    after_accuracy: float
    before_macro_f1: float
    after_macro_f1: float

    @property
    def delta_accuracy(self) -> float:
        """Percentage points."""
        return 100.0 * (self.after_accuracy - self.before_accuracy)

    @property
    def delta_macro_f1(self) -> float:
        return 100.0 * (self.after_macro_f1 - self.before_macro_f1)

    @property
    def regression(self) -> bool:
        return self.delta_accuracy < 0 or self.delta_macro_f1 < 0

    def to_json(self) -> dict:
        return {
            "before": {"accuracy": self.before_accuracy, "macro_f1": self.before_macro_f1},
            "after": {"accuracy": self.after_accuracy, "macro_f1": self.after_macro_f1},
            "delta_accuracy_points": self.delta_accuracy,
            "delta_macro_f1_points": self.delta_macro_f1,
            "regression": self.regression,
        }


def compare(before: EvalResult, after: EvalResult) -> Comparison:
    if before.K != after.K:
        raise ValueError(f"cannot compare results over {before.K} and {after.K} classes")
    return Comparison(before.accuracy, after.accuracy, before.macro_f1, after.macro_f1)


def _arrow(delta: float) -> str:
    if delta > 0:
        return f"(+{delta:.2f})"
    if delta < 0:
        return f"({delta:.2f})"
    return ""


def comparison_table(rows: dict[str, Comparison]) -> str:
    """Aligned plain-text rendering: one line per named comparison, scores in percent."""
    name_w = max([len("setting"), *(len(n) for n in rows)])
    lines = [f"{'setting':<{name_w}}  {'acc before':>10}  {'acc after':>17}  {'F1 before':>10}  {'F1 after':>17}"]
    for name, c in rows.items():
        acc_after = f"{100 * c.after_accuracy:.2f} {_arrow(c.delta_accuracy)}"
        f1_after = f"{100 * c.after_macro_f1:.2f} {_arrow(c.delta_macro_f1)}"
        lines.append(
            f"{name:<{name_w}}  {100 * c.before_accuracy:>10.2f}  {acc_after:>17}  "
            f"{100 * c.before_macro_f1:>10.2f}  {f1_after:>17}"
        )
    return "\n".join(lines)
