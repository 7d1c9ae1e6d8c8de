"""Confusion-matrix segmentation metrics: per-class IoU, mean IoU, pixel accuracy.

Ground-truth pixels labeled 255 are excluded; predictions are never ignorable.
Classes absent from both prediction and ground truth have undefined IoU and
drop out of the mean.
"""

from __future__ import annotations

import numpy as np

from hrseg.data import IGNORE


class ConfusionMatrix:
    """counts[g][p] = number of pixels with ground truth g predicted as p."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ValueError("need at least one class")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
        valid = gt != IGNORE
        p, g = pred[valid].astype(np.int64), gt[valid].astype(np.int64)
        if p.size and (p.min() < 0 or p.max() >= self.num_classes):
            raise ValueError(f"prediction values outside [0,{self.num_classes})")
        if g.size and g.max() >= self.num_classes:
            raise ValueError(f"ground-truth values outside [0,{self.num_classes}) and != {IGNORE}")
        flat = np.bincount(g * self.num_classes + p, minlength=self.num_classes**2)
        self.counts += flat.reshape(self.num_classes, self.num_classes)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """IoU_c = TP / (TP + FP + FN); NaN where the class never occurs."""
    tp = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - np.diag(cm.counts)
    with np.errstate(invalid="ignore"):
        return np.where(union > 0, tp / union, np.nan)


def miou(cm: ConfusionMatrix) -> float:
    ious = iou_per_class(cm)
    defined = ious[~np.isnan(ious)]
    if defined.size == 0:
        raise ValueError("mIoU undefined: no class appears in the evaluation")
    return float(defined.mean())


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("pixel accuracy undefined on an empty matrix")
    return float(np.diag(cm.counts).sum() / cm.total)


def evaluate_dataset(model, dataset) -> ConfusionMatrix:
    """Accumulate predictions over a labeled dataset (eval-mode inference)."""
    from hrseg.seghead import predict
    from hrseg.tensor import Tensor

    num_classes = dataset.num_classes or model.spec.num_classes
    model.set_mode("eval")
    cm = ConfusionMatrix(num_classes)
    for s in dataset:
        pred = predict(model, Tensor(s.image[None]))[0]
        cm.accumulate(pred, s.label)
    return cm


def metrics_csv(cm: ConfusionMatrix) -> str:
    """Per-class IoU rows, then the two summary rows."""
    lines = ["class,iou"]
    for c, v in enumerate(iou_per_class(cm)):
        lines.append(f"{c},{'undefined' if np.isnan(v) else f'{v:.6f}'}")
    lines.append(f"miou,{miou(cm):.6f}")
    lines.append(f"pixel_accuracy,{pixel_accuracy(cm):.6f}")
    return "\n".join(lines) + "\n"
