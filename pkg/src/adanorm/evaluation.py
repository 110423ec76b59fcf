"""Confusion matrices, macro metrics, Cohen's kappa and the shift robustness check."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import shift_windows
from .training import predict


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError("confusion matrix must be square")
        if np.any(self.counts < 0):
            raise ValueError("confusion counts must be non-negative")

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp(self) -> np.ndarray:
        return np.diag(self.counts)

    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp()

    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp()

    def tn(self) -> np.ndarray:
        return self.total - self.tp() - self.fp() - self.fn()


def confusion_from_preds(true, pred, n: int) -> ConfusionMatrix:
    true = np.asarray(true, dtype=np.int64).ravel()
    pred = np.asarray(pred, dtype=np.int64).ravel()
    if true.shape != pred.shape:
        raise ValueError(f"length mismatch: {true.size} true vs {pred.size} predicted")
    for name, arr in (("true", true), ("predicted", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise ValueError(f"{name} class out of range [0, {n})")
    counts = np.zeros((n, n), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return ConfusionMatrix(counts)


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


@dataclass
class MetricsReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    kappa: float = 0.0
    accuracy: float = 0.0
    kappa_degenerate: bool = False
    confusion: ConfusionMatrix | None = field(default=None, repr=False)

    def as_dict(self) -> dict[str, float]:
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "kappa": self.kappa,
        }

    def kv(self, prefix: str = "") -> str:
        return " ".join(f"{prefix}{k}={v:.6f}" for k, v in self.as_dict().items())


def macro_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Per-class precision/recall/F1 and their unweighted means.

    Undefined ratios (zero denominators) count as 0.  F1 uses the count form
    ``2TP / (2TP + FP + FN)``, equal to the harmonic mean of precision and
    recall but rounded once.
    """
    tp, fp, fn = cm.tp(), cm.fp(), cm.fn()
    precision = _safe_ratio(tp, tp + fp)
    recall = _safe_ratio(tp, tp + fn)
    f1 = _safe_ratio(2 * tp, 2 * tp + fp + fn)
    return MetricsReport(
        precision=precision,
        recall=recall,
        f1=f1,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        confusion=cm,
    )


def cohen_kappa(cm: ConfusionMatrix, return_flag: bool = False):
    total = cm.total
    if total == 0:
        raise ValueError("kappa of an empty confusion matrix")
    # exact integer form of (p_o - p_e) / (1 - p_e), scaled by total**2
    rows = [int(v) for v in cm.counts.sum(axis=1)]
    cols = [int(v) for v in cm.counts.sum(axis=0)]
    chance = sum(r * c for r, c in zip(rows, cols))
    agree = total * int(np.trace(cm.counts))
    degenerate = chance == total * total
    kappa = 0.0 if degenerate else (agree - chance) / (total * total - chance)
    return (kappa, degenerate) if return_flag else kappa


def metrics_report(cm: ConfusionMatrix) -> MetricsReport:
    report = macro_metrics(cm)
    if cm.total:
        report.kappa, report.kappa_degenerate = cohen_kappa(cm, return_flag=True)
        report.accuracy = float(np.trace(cm.counts)) / cm.total
    return report


def evaluate(model, normalizer, windows, labels, n_classes: int) -> MetricsReport:
    pred = predict(model, normalizer, windows)
    return metrics_report(confusion_from_preds(labels, pred, n_classes))


# -- robustness -----------------------------------------------------------


@dataclass
class ShiftSpec:
    means: np.ndarray
    multiplier: float = 3.0
    exempt: Sequence[int] = ()


@dataclass
class ShiftResult:
    clean: MetricsReport
    shifted: MetricsReport

    @property
    def accuracy_delta(self) -> float:
        """Shifted minus clean accuracy (negative means the shift hurt)."""
        return self.shifted.accuracy - self.clean.accuracy


def robustness_shift_eval(model, normalizer, windows, labels, shift: ShiftSpec, n_classes: int) -> ShiftResult:
    clean = evaluate(model, normalizer, windows, labels, n_classes)
    moved = shift_windows(windows, shift.means, shift.multiplier, shift.exempt)
    return ShiftResult(clean=clean, shifted=evaluate(model, normalizer, moved, labels, n_classes))


# -- aggregation and emission ---------------------------------------------


def aggregate(reports: Sequence[MetricsReport]) -> dict[str, tuple[float, float]]:
    """Mean and sample standard deviation of each headline metric across folds."""
    out = {}
    for key in ("accuracy", "macro_precision", "macro_recall", "macro_f1", "kappa"):
        vals = np.array([r.as_dict()[key] for r in reports], dtype=np.float64)
        sd = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out[key] = (float(vals.mean()), sd)
    return out


def format_table(rows: dict[str, MetricsReport], aggregate_row: dict[str, tuple[float, float]] | None = None) -> str:
    keys = ("accuracy", "macro_precision", "macro_recall", "macro_f1", "kappa")
    head = f"{'run':<12}" + "".join(f"{k:>18}" for k in keys)
    lines = [head, "-" * len(head)]
    for name, rep in rows.items():
        d = rep.as_dict()
        lines.append(f"{name:<12}" + "".join(f"{d[k]:>18.4f}" for k in keys))
    if aggregate_row:
        lines.append(f"{'mean+-sd':<12}" + "".join(f"{aggregate_row[k][0]:>10.4f}+-{aggregate_row[k][1]:<6.4f}" for k in keys))
    return "\n".join(lines)
