from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import accuracy_score, confusion_matrix, precision_recall_fscore_support

from .dataset import Dastgah

N_CLASSES = len(Dastgah)

# Row order of the text classification report.
REPORT_ORDER: Tuple[Dastgah, ...] = (
    Dastgah.SHUR,
    Dastgah.SEGAH,
    Dastgah.MAHUR,
    Dastgah.HOMAYOUN,
    Dastgah.RASTPANJGAH,
    Dastgah.NAVA,
    Dastgah.CHAHARGAH,
)


class EvaluationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClassMetrics:
    name: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class Averages:
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class ClassReport:
    classes: List[ClassMetrics]
    accuracy: float
    macro: Averages
    weighted: Averages
    confusion: List[List[int]]

    @property
    def total(self) -> int:
        return int(sum(c.support for c in self.classes))

    def to_dict(self) -> dict:
        return {
            "classes": [asdict(c) for c in self.classes],
            "accuracy": self.accuracy,
            "macro": asdict(self.macro),
            "weighted": asdict(self.weighted),
            "confusion": [list(map(int, row)) for row in self.confusion],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ClassReport":
        return cls(
            classes=[ClassMetrics(**c) for c in raw["classes"]],
            accuracy=float(raw["accuracy"]),
            macro=Averages(**raw["macro"]),
            weighted=Averages(**raw["weighted"]),
            confusion=[list(map(int, row)) for row in raw["confusion"]],
        )


def _codes(values: Sequence[int], what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() >= N_CLASSES):
        bad = arr[(arr < 0) | (arr >= N_CLASSES)][0]
        raise ValueError(f"{what} code {bad} outside 0..{N_CLASSES - 1}")
    return arr


def confusion(predictions: Sequence[int], labels: Sequence[int]) -> np.ndarray:
    """7x7 counts, rows = true class, columns = predicted class."""
    pred = _codes(predictions, "prediction")
    true = _codes(labels, "label")
    if pred.shape != true.shape:
        raise ValueError(f"{len(pred)} predictions for {len(true)} labels")
    if pred.size == 0:
        return np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    return confusion_matrix(true, pred, labels=list(range(N_CLASSES))).astype(np.int64)


def _pairs(cm: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Expand counts back into (true, pred) code arrays."""
    cells = np.repeat(np.arange(cm.size), cm.reshape(-1))
    return cells // N_CLASSES, cells % N_CLASSES


def weighted_average(values: Sequence[float], supports: Sequence[int]) -> float:
    w = np.asarray(supports, dtype=np.float64)
    if w.sum() <= 0:
        return 0.0
    return float(np.dot(np.asarray(values, dtype=np.float64), w) / w.sum())


def report(cm: np.ndarray) -> ClassReport:
    cm = np.asarray(cm, dtype=np.int64)
    if cm.shape != (N_CLASSES, N_CLASSES) or (cm < 0).any():
        raise EvaluationError(f"confusion matrix must be {N_CLASSES}x{N_CLASSES} non-negative counts")
    total = int(cm.sum())
    if total == 0:
        raise EvaluationError("empty confusion matrix: nothing was evaluated")

    true, pred = _pairs(cm)
    labels = list(range(N_CLASSES))
    precision, recall, f1, support = precision_recall_fscore_support(true, pred, labels=labels, zero_division=0)

    def averaged(how: str) -> Averages:
        p, r, f, _ = precision_recall_fscore_support(true, pred, labels=labels, average=how, zero_division=0)
        return Averages(float(p), float(r), float(f))

    classes = [
        ClassMetrics(d.label, float(precision[d]), float(recall[d]), float(f1[d]), int(support[d])) for d in Dastgah
    ]
    return ClassReport(
        classes=classes,
        accuracy=float(accuracy_score(true, pred)),
        macro=averaged("macro"),
        weighted=averaged("weighted"),
        confusion=cm.tolist(),
    )


def render_confusion(cm: np.ndarray) -> str:
    names = [d.label for d in Dastgah]
    frame = pd.DataFrame(np.asarray(cm, dtype=np.int64), index=names, columns=names)
    frame.index.name = "true \\ pred"
    return frame.to_string()


def render(rep: ClassReport, fmt: str = "text") -> str:
    if fmt == "json":
        return json.dumps(rep.to_dict(), indent=2)
    if fmt != "text":
        raise ValueError(f"report format must be text or json, got {fmt!r}")

    by_name = {c.name: c for c in rep.classes}
    width = max(len("Average weighted"), *(len(d.label) for d in Dastgah))
    lines = [f"{'':<{width}}  {'precision':>9}  {'recall':>6}  {'f1-score':>8}  {'support':>7}"]
    for d in REPORT_ORDER:
        c = by_name[d.label]
        lines.append(f"{c.name:<{width}}  {c.precision:>9.2f}  {c.recall:>6.2f}  {c.f1:>8.2f}  {c.support:>7d}")
    total = rep.total
    lines.append("")
    lines.append(f"{'Total Accuracy':<{width}}  {'':>9}  {'':>6}  {rep.accuracy:>8.2f}  {total:>7d}")
    for label, avg in (("Average Macro", rep.macro), ("Average weighted", rep.weighted)):
        lines.append(f"{label:<{width}}  {avg.precision:>9.2f}  {avg.recall:>6.2f}  {avg.f1:>8.2f}  {total:>7d}")
    return "\n".join(lines)


def majority_vote(segment_probs: np.ndarray) -> Tuple[int, np.ndarray, np.ndarray]:
    """Record verdict from per-segment probabilities: (class, vote counts, mean probabilities).

    Ties in vote count go to the tied class with the higher mean probability.
    """
    probs = np.asarray(segment_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise EvaluationError("majority vote needs at least one segment")
    votes = np.bincount(np.argmax(probs, axis=1), minlength=probs.shape[1])
    mean = probs.mean(axis=0)
    tied = np.flatnonzero(votes == votes.max())
    winner = int(tied[np.argmax(mean[tied])])
    return winner, votes, mean


def instrument_breakdown(predictions: Sequence[int], labels: Sequence[int], instruments: Sequence[str]) -> pd.DataFrame:
    frame = pd.DataFrame(
        {
            "instrument": list(instruments),
            "correct": np.asarray(predictions) == np.asarray(labels),
        }
    )
    if frame.empty:
        return pd.DataFrame(columns=["segments", "correct", "accuracy"])
    out = frame.groupby("instrument")["correct"].agg(segments="size", correct="sum")
    out["correct"] = out["correct"].astype(int)
    out["accuracy"] = out["correct"] / out["segments"]
    return out.sort_index()
