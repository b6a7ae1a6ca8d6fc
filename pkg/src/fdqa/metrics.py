"""Confusion-matrix measures and class-conditional scenario selection.

Rows are true classes, columns predicted classes, in the order
Good, Usable, Unusable.  Terms whose denominator is zero are undefined: they
are reported as NaN and listed in :attr:`MetricsReport.undefined` instead of
being replaced by zero.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .labels import QualityLabel

NUM_CLASSES = 3
_NAMES = [q.title for q in QualityLabel]


class MetricsError(ValueError):
    pass


class ConfusionMatrix:
    """3 x 3 non-negative integer counts; ``counts[i, j]`` = true i predicted j."""

    __slots__ = ("counts",)

    def __init__(self, counts):
        arr = np.asarray(counts)
        if arr.shape != (NUM_CLASSES, NUM_CLASSES):
            raise MetricsError(f"confusion matrix must be 3 x 3, got {list(arr.shape)}")
        if np.any(arr < 0) or np.any(arr != np.round(arr)):
            raise MetricsError("confusion matrix entries must be non-negative integers")
        self.counts = arr.astype(np.int64)
        self.counts.flags.writeable = False

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __repr__(self) -> str:
        return f"ConfusionMatrix({self.counts.tolist()})"

    def to_csv(self) -> str:
        return "".join(",".join(str(v) for v in row) + "\n" for row in self.counts)


def _counts(C) -> np.ndarray:
    return C.counts if isinstance(C, ConfusionMatrix) else ConfusionMatrix(C).counts


def confusion_matrix(pairs: Iterable[tuple[int, int]]) -> ConfusionMatrix:
    """Count ``(true, predicted)`` label pairs."""
    counts = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    for t, p in pairs:
        counts[int(QualityLabel(int(t))), int(QualityLabel(int(p)))] += 1
    return ConfusionMatrix(counts)


def confusion_from_arrays(y_true, y_pred) -> ConfusionMatrix:
    t = np.asarray(y_true, dtype=np.int64).reshape(-1)
    p = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    if t.shape != p.shape:
        raise MetricsError("y_true and y_pred differ in length")
    if t.size and (t.min() < 0 or p.min() < 0 or t.max() > 2 or p.max() > 2):
        raise MetricsError("labels must be 0, 1 or 2")
    counts = np.bincount(t * NUM_CLASSES + p, minlength=NUM_CLASSES**2).reshape(NUM_CLASSES, NUM_CLASSES)
    return ConfusionMatrix(counts)


@dataclass(frozen=True)
class NormalizedMatrix:
    values: np.ndarray  # rows with zero count are NaN
    undefined_rows: tuple[int, ...]

    def __getitem__(self, idx):
        return self.values[idx]


def normalize_rows(C) -> NormalizedMatrix:
    """Row-normalise counts so each defined row sums to one."""
    c = _counts(C).astype(np.float64)
    sums = c.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        vals = np.where(sums > 0, c / sums, np.nan)
    undefined = tuple(int(i) for i in np.flatnonzero(sums[:, 0] == 0))
    return NormalizedMatrix(vals, undefined)


def accuracy(C) -> float:
    c = _counts(C)
    total = c.sum()
    return float(np.trace(c) / total) if total else math.nan


def precision_terms(C) -> np.ndarray:
    """Per predicted class: C_jj / sum_l C_lj (NaN when the column is empty)."""
    c = _counts(C).astype(np.float64)
    cols = c.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(cols > 0, np.diag(c) / cols, np.nan)


def recall_terms(C) -> np.ndarray:
    """Per true class: C_ii / sum_k C_ik, i.e. the diagonal of the normalised matrix."""
    return np.diag(normalize_rows(C).values).copy()


def precision_macro(C) -> float:
    return float(np.mean(precision_terms(C)))


def recall_macro(C) -> float:
    return float(np.mean(recall_terms(C)))


def f_score(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall."""
    if math.isnan(precision) or math.isnan(recall):
        return math.nan
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision_macro: float
    recall_macro: float
    f_score: float
    normalized: NormalizedMatrix
    confusion: ConfusionMatrix
    undefined: tuple[str, ...] = ()

    @property
    def flagged(self) -> bool:
        return bool(self.undefined)

    def rows(self) -> list[tuple[str, float]]:
        return [
            ("accuracy", self.accuracy),
            ("precision", self.precision_macro),
            ("recall", self.recall_macro),
            ("f_score", self.f_score),
        ]

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("metric,value\n")
        for name, v in self.rows():
            out.write(f"{name},{v:.10g}\n")
        return out.getvalue()

    def to_text(self, title: str | None = None) -> str:
        lines = [title] if title else []
        for name, v in self.rows():
            lines.append(f"{name:<10} {_fmt(v)}")
        lines.append("normalized confusion matrix (rows: true, cols: predicted)")
        lines.append(" " * 10 + "".join(f"{n:>10}" for n in _NAMES))
        for i, n in enumerate(_NAMES):
            lines.append(f"{n:<10}" + "".join(f"{_fmt(v):>10}" for v in self.normalized.values[i]))
        if self.undefined:
            lines.append("undefined terms: " + ", ".join(self.undefined))
        return "\n".join(lines) + "\n"


def _fmt(v: float) -> str:
    return "undefined" if math.isnan(v) else f"{v:.4g}"


def report(C) -> MetricsReport:
    cm = C if isinstance(C, ConfusionMatrix) else ConfusionMatrix(C)
    norm = normalize_rows(cm)
    undefined = [f"recall[{_NAMES[i]}]" for i in norm.undefined_rows]
    undefined += [f"precision[{_NAMES[j]}]" for j in np.flatnonzero(np.isnan(precision_terms(cm)))]
    p, r = precision_macro(cm), recall_macro(cm)
    acc = accuracy(cm)
    if math.isnan(acc):
        undefined.append("accuracy")
    return MetricsReport(acc, p, r, f_score(p, r), norm, cm, tuple(undefined))


def counts_from_normalized(rows_percent, class_totals: Sequence[int]) -> ConfusionMatrix:
    """Integer counts from row-normalised percentages and per-class totals."""
    rows = np.asarray(rows_percent, dtype=np.float64)
    totals = np.asarray(class_totals, dtype=np.float64).reshape(-1, 1)
    return ConfusionMatrix(np.round(rows / 100.0 * totals))


def scenario_select_index(
    candidates: Sequence[ConfusionMatrix], target_class: int, accuracy_band: tuple[float, float]
) -> int:
    """Index of the in-band candidate with the best class-conditional accuracy.

    Ties on the target diagonal break toward higher overall accuracy, then
    toward the earlier candidate.
    """
    lo, hi = accuracy_band
    target = int(QualityLabel(int(target_class)))
    best, best_key = -1, None
    for i, C in enumerate(candidates):
        acc = accuracy(C)
        if not lo <= acc <= hi:
            continue
        diag = normalize_rows(C).values[target, target]
        if math.isnan(diag):
            continue
        key = (diag, acc)
        if best_key is None or key > best_key:
            best, best_key = i, key
    if best < 0:
        raise MetricsError(f"no candidate has accuracy within [{lo}, {hi}]")
    return best


def scenario_select(
    candidates: Sequence[ConfusionMatrix], target_class: int, accuracy_band: tuple[float, float]
) -> ConfusionMatrix:
    return candidates[scenario_select_index(candidates, target_class, accuracy_band)]
