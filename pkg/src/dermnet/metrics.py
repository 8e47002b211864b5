"""Segmentation overlap scores and 3-class classification quality."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .datasets import CLASSES


def _counts(pred: np.ndarray, truth: np.ndarray) -> tuple[int, int, int]:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"mask dims differ: {pred.shape} vs {truth.shape}")
    inter = int(np.count_nonzero(pred & truth))
    return inter, int(np.count_nonzero(pred)), int(np.count_nonzero(truth))


def jaccard(pred: np.ndarray, truth: np.ndarray) -> float:
    """Intersection over union; two empty masks score 1."""
    inter, p, t = _counts(pred, truth)
    union = p + t - inter
    return 1.0 if union == 0 else inter / union


def dice(pred: np.ndarray, truth: np.ndarray) -> float:
    inter, p, t = _counts(pred, truth)
    return 1.0 if p + t == 0 else 2 * inter / (p + t)


@dataclass
class SegmentationScores:
    jaccard: list[float] = field(default_factory=list)
    dice: list[float] = field(default_factory=list)

    def add(self, pred: np.ndarray, truth: np.ndarray) -> None:
        self.jaccard.append(jaccard(pred, truth))
        self.dice.append(dice(pred, truth))

    @property
    def mean_jaccard(self) -> float:
        return float(np.mean(self.jaccard)) if self.jaccard else float("nan")

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice)) if self.dice else float("nan")


@dataclass
class ClassificationScores:
    confusion: np.ndarray  # rows = truth, cols = prediction
    accuracy: float
    sensitivity: list[Optional[float]]
    specificity: list[Optional[float]]


def classification_report(preds: Sequence[int], truths: Sequence[int], num_classes: int = 3) -> ClassificationScores:
    """Accuracy, confusion matrix and per-class sensitivity/specificity.

    A rate whose denominator is zero is reported as None rather than 0.
    """
    preds = np.asarray(preds, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if preds.size == 0:
        raise ValueError("classification_report needs at least one sample")
    if preds.shape != truths.shape:
        raise ValueError(f"length mismatch: {preds.size} predictions vs {truths.size} truths")
    for arr in (preds, truths):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"class indices must lie in [0, {num_classes})")
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (truths, preds), 1)
    total = int(m.sum())
    rows, cols = m.sum(axis=1), m.sum(axis=0)
    sens, spec = [], []
    for k in range(num_classes):
        sens.append(float(m[k, k] / rows[k]) if rows[k] else None)
        neg = total - rows[k]
        spec.append(float((total - rows[k] - cols[k] + m[k, k]) / neg) if neg else None)
    return ClassificationScores(m, float(np.trace(m) / total), sens, spec)


@dataclass
class MetricsReport:
    split: str
    segmentation: Optional[SegmentationScores] = None
    classification: Optional[ClassificationScores] = None
    images: list[str] = field(default_factory=list)

    def records(self) -> list[dict]:
        """Line-record rendering: one summary record, then per-image records."""
        summary: dict = {"kind": "summary", "split": self.split, "count": len(self.images)}
        if self.segmentation is not None:
            summary["mean_jaccard"] = self.segmentation.mean_jaccard
            summary["mean_dice"] = self.segmentation.mean_dice
        if self.classification is not None:
            c = self.classification
            summary["accuracy"] = c.accuracy
            summary["confusion"] = c.confusion.tolist()
            summary["sensitivity"] = dict(zip(CLASSES, c.sensitivity))
            summary["specificity"] = dict(zip(CLASSES, c.specificity))
        out = [summary]
        if self.segmentation is not None:
            for name, j, d in zip(self.images, self.segmentation.jaccard, self.segmentation.dice):
                out.append({"kind": "image", "image": name, "jaccard": j, "dice": d})
        return out

    def to_text(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records())
