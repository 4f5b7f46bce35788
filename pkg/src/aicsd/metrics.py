"""Confusion-matrix based segmentation metrics: per-class IoU, mIoU, pixel accuracy."""

from dataclasses import dataclass

import numpy as np
import torch

from aicsd.errors import DegenerateEvaluationError, InvalidLabelError, ShapeError


def argmax_predict(logits):
    """Per-pixel arg-max over the class axis of ``[B, C, H, W]`` logits.

    Ties go to the lowest class index.
    """
    if torch.is_tensor(logits):
        logits = logits.detach().cpu().numpy()
    logits = np.asarray(logits)
    if logits.ndim != 4:
        raise ShapeError(f"expected [B, C, H, W] logits, got {logits.shape}")
    # np.argmax returns the first occurrence of the maximum
    return np.argmax(logits, axis=1)


class ConfusionMatrix:
    """Pixel counts ``counts[truth, pred]`` accumulated over an evaluation run."""

    def __init__(self, num_classes, counts=None):
        if num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        if self.counts.shape != (num_classes, num_classes):
            raise ShapeError(f"counts must be {num_classes}x{num_classes}")

    @property
    def total(self):
        return int(self.counts.sum())

    def update(self, pred, truth, ignore_index=255):
        """Add one batch of predictions; pixels whose truth is ``ignore_index`` are skipped."""
        pred = np.asarray(pred.cpu() if torch.is_tensor(pred) else pred).astype(np.int64)
        truth = np.asarray(truth.cpu() if torch.is_tensor(truth) else truth).astype(np.int64)
        if pred.shape != truth.shape:
            raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
        keep = truth != ignore_index
        t = truth[keep]
        p = pred[keep]
        c = self.num_classes
        if t.size and (t.min() < 0 or t.max() >= c):
            raise InvalidLabelError(f"truth label outside 0..{c - 1} and not ignore_index={ignore_index}")
        if pred.size and (pred.min() < 0 or pred.max() >= c):
            raise InvalidLabelError(f"predicted label outside 0..{c - 1}")
        self.counts += np.bincount(t * c + p, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other):
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge confusion matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def copy(self):
        return ConfusionMatrix(self.num_classes, self.counts.copy())


def update_confusion(conf, pred, truth, ignore_index=255):
    """Functional form of :meth:`ConfusionMatrix.update`; returns a new matrix."""
    return conf.copy().update(pred, truth, ignore_index)


@dataclass
class MetricsReport:
    """Evaluation summary.  Classes with zero union have IoU ``nan``."""

    per_class_iou: np.ndarray
    miou: float
    pixel_accuracy: float
    valid_classes: int

    def to_dict(self):
        return {
            "per_class_iou": [None if np.isnan(v) else float(v) for v in self.per_class_iou],
            "miou": self.miou,
            "pixel_accuracy": self.pixel_accuracy,
            "valid_classes": self.valid_classes,
        }


def compute_report(conf):
    counts = conf.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise DegenerateEvaluationError("confusion matrix is empty")
    tp = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    iou = np.full(conf.num_classes, np.nan)
    defined = union > 0
    iou[defined] = tp[defined] / union[defined]
    return MetricsReport(
        per_class_iou=iou,
        miou=float(iou[defined].mean()),
        pixel_accuracy=float(tp.sum() / total),
        valid_classes=int(defined.sum()),
    )
