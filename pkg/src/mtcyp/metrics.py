"""Yield-point error metrics and confusion-matrix class metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import REAL_CLASSES, CropType


def _pair(y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.size} targets, {y_hat.size} predictions")
    if y.size == 0:
        raise ValueError("no points to evaluate")
    return y, y_hat


def rmse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def mae(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


@dataclass
class ConfusionMatrix:
    """Counts over the five real classes.

    ``counts[t, p]`` is pixels of true class t predicted as p. Predictions
    of "unlabeled" at evaluated pixels go to ``missed[t]``: they are false
    negatives for t and false positives for no real class.
    """

    counts: np.ndarray
    missed: np.ndarray

    @classmethod
    def empty(cls) -> "ConfusionMatrix":
        return cls(np.zeros((REAL_CLASSES, REAL_CLASSES), np.int64), np.zeros(REAL_CLASSES, np.int64))

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.missed + other.missed)

    @property
    def total(self) -> int:
        return int(self.counts.sum() + self.missed.sum())

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.counts).copy()

    @property
    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp

    @property
    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp + self.missed


def confusion(pred_classes, crop_mask) -> ConfusionMatrix:
    pred = np.asarray(pred_classes).ravel().astype(np.int64)
    true = np.asarray(crop_mask).ravel().astype(np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"prediction has {pred.size} pixels, mask has {true.size}")
    keep = true != CropType.UNLABELED
    pred, true = pred[keep], true[keep]
    hit = pred != CropType.UNLABELED
    counts = np.bincount(
        true[hit] * REAL_CLASSES + pred[hit], minlength=REAL_CLASSES**2
    ).reshape(REAL_CLASSES, REAL_CLASSES)
    missed = np.bincount(true[~hit], minlength=REAL_CLASSES)
    return ConfusionMatrix(counts.astype(np.int64), missed.astype(np.int64))


def _evaluated(cm: ConfusionMatrix) -> np.ndarray:
    if cm.total == 0:
        raise ValueError("confusion matrix is empty; no labeled pixels were evaluated")
    true_n = cm.counts.sum(axis=1) + cm.missed
    pred_n = cm.counts.sum(axis=0)
    return (true_n + pred_n) > 0


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    return _ratio(cm.tp, cm.tp + cm.fp + cm.fn)


def miou(cm: ConfusionMatrix) -> float:
    """Mean IoU (percent) over classes seen in either ground truth or prediction."""
    ev = _evaluated(cm)
    return float(100 * iou_per_class(cm)[ev].mean())


def macc(cm: ConfusionMatrix, recall: bool = False) -> float:
    """Mean of TP/(TP+FP) over evaluated classes, in percent.

    With ``recall=True`` the conventional TP/(TP+FN) averaged over classes
    present in the ground truth is returned instead. A class that appears
    but is never predicted scores 0 in the default form.
    """
    ev = _evaluated(cm)
    if recall:
        present = (cm.counts.sum(axis=1) + cm.missed) > 0
        return float(100 * _ratio(cm.tp, cm.tp + cm.fn)[present].mean())
    return float(100 * _ratio(cm.tp, cm.tp + cm.fp)[ev].mean())


def miou_per_image(cms: list[ConfusionMatrix]) -> float:
    """Average of per-image mIoU values; images with no labeled pixels are skipped."""
    vals = [miou(cm) for cm in cms if cm.total > 0]
    if not vals:
        raise ValueError("no image has labeled pixels")
    return float(np.mean(vals))


def macc_per_image(cms: list[ConfusionMatrix], recall: bool = False) -> float:
    vals = [macc(cm, recall) for cm in cms if cm.total > 0]
    if not vals:
        raise ValueError("no image has labeled pixels")
    return float(np.mean(vals))


def summarize(records: list[dict], keys=("rmse", "mae", "miou", "macc")) -> dict:
    """Mean and standard deviation of each metric over fold/run records."""
    out = {}
    for k in keys:
        vals = [r[k] for r in records if r.get(k) is not None]
        if vals:
            # fsum keeps the aggregate independent of record order
            mean = math.fsum(vals) / len(vals)
            std = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / len(vals))
            out[k] = {"mean": mean, "std": std, "n": len(vals)}
    return out
