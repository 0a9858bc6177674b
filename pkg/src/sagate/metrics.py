"""Confusion-matrix segmentation metrics."""

from __future__ import annotations

import csv
import io as _io
from typing import Sequence

import numpy as np

from .errors import EmptyMatrix

IGNORE_LABEL = 255


class ConfusionMatrix:
    """``counts[g, p]`` = number of pixels with ground truth ``g`` predicted as ``p``."""

    def __init__(self, num_classes: int, ignore_index: int = IGNORE_LABEL):
        self.num_classes = int(num_classes)
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(pred).ravel().astype(np.int64)
        gt = np.asarray(gt).ravel().astype(np.int64)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction and label sizes differ: {pred.shape} vs {gt.shape}")
        keep = gt != self.ignore_index
        pred, gt = pred[keep], gt[keep]
        k = self.num_classes
        if gt.size and (gt.max() >= k or gt.min() < 0 or pred.max() >= k or pred.min() < 0):
            raise ValueError("label out of range")
        self.counts += np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes, self.ignore_index)
        out.counts = self.counts + other.counts
        return out

    __add__ = merge

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou_per_class(self) -> np.ndarray:
        """IoU per class; NaN where the class has empty union."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(0) + self.counts.sum(1) - np.diag(self.counts)
        out = np.full(self.num_classes, np.nan)
        present = union > 0
        out[present] = tp[present] / union[present]
        return out

    def miou(self) -> float:
        if self.total == 0:
            raise EmptyMatrix("no pixels accumulated")
        return float(np.nanmean(self.iou_per_class()))

    def pixel_acc(self) -> float:
        if self.total == 0:
            raise EmptyMatrix("no pixels accumulated")
        return float(np.trace(self.counts) / self.total)


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    return cm.accumulate(pred, gt)


def miou(cm: ConfusionMatrix) -> float:
    return cm.miou()


def pixel_acc(cm: ConfusionMatrix) -> float:
    return cm.pixel_acc()


def chance_iou(frequency: float) -> float:
    """Expected IoU of a guesser that labels pixels class ``k`` at its base rate ``p``.

    Intersection ``p^2``, union ``2p - p^2``.
    """
    p = float(frequency)
    return p / (2.0 - p) if p > 0 else 0.0


def format_table(header: Sequence[str], rows: Sequence[Sequence], floatfmt: str = "{:.4f}") -> str:
    """Aligned plain-text table."""

    def cell(v):
        return floatfmt.format(v) if isinstance(v, float) else str(v)

    cells = [[cell(v) for v in header]] + [[cell(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def to_csv(header: Sequence[str], rows: Sequence[Sequence], floatfmt: str = "{:.6f}") -> str:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for r in rows:
        writer.writerow([floatfmt.format(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()
