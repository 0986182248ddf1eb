"""Confusion-matrix segmentation metrics."""
from __future__ import annotations

import csv
import io as _io
from typing import Sequence

import numpy as np


class ConfusionMatrix:
    """K x K counts; rows are ground truth, columns are predictions."""

    def __init__(self, classes: int):
        self.counts = np.zeros((classes, classes), dtype=np.int64)

    @property
    def classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, pred, gt, ignore_label: int = 255) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
        k = self.classes
        keep = gt != ignore_label
        p, g = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
        if p.size and (p.min() < 0 or p.max() >= k):
            raise ValueError("prediction outside [0, K)")
        if g.size and (g.min() < 0 or g.max() >= k):
            raise ValueError("ground truth outside [0, K) and not ignored")
        self.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.classes)
        out.counts = self.counts + other.counts
        return out


def _check(cm: ConfusionMatrix):
    if cm.total == 0:
        raise ValueError("empty confusion matrix")


def per_class_iou(cm: ConfusionMatrix) -> list:
    """IoU per class; ``None`` where the class has zero union."""
    _check(cm)
    c = cm.counts
    tp = np.diag(c)
    union = c.sum(0) + c.sum(1) - tp
    return [None if u == 0 else float(t) / float(u) for t, u in zip(tp, union)]


def miou(cm: ConfusionMatrix) -> float:
    vals = [v for v in per_class_iou(cm) if v is not None]
    return float(sum(vals) / len(vals))


def pixel_acc(cm: ConfusionMatrix) -> float:
    _check(cm)
    return float(np.trace(cm.counts)) / cm.total


def argmax_predict(logits) -> np.ndarray:
    """Per-pixel class index over axis 1 of [N, K, H, W]; ties go to the lowest index."""
    arr = logits.data if hasattr(logits, "data") else np.asarray(logits)
    return np.argmax(arr, axis=1)


def iou_table_csv(cm: ConfusionMatrix, names: Sequence[str]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "iou"])
    for name, v in zip(names, per_class_iou(cm)):
        w.writerow([name, "" if v is None else f"{v:.6f}"])
    w.writerow(["mIoU", f"{miou(cm):.6f}"])
    w.writerow(["pixel_acc", f"{pixel_acc(cm):.6f}"])
    return buf.getvalue()
