"""Evaluation metrics: mean IoU over classes and RMSE over valid depth pixels.

miou works on integer label maps and pools exactly via per-class
TP/FP/FN counts; rmse is the square root of the masked mean squared error
and is reported in millimeters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .exceptions import InvalidClassId
from .losses import depth_loss


@dataclass
class ConfusionCounts:
    """Per-class true positive / false positive / false negative pixel counts."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @classmethod
    def zeros(cls, nc: int) -> "ConfusionCounts":
        return cls(np.zeros(nc, np.int64), np.zeros(nc, np.int64), np.zeros(nc, np.int64))

    def add(self, other: "ConfusionCounts") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn

    def miou(self) -> float:
        """Mean IoU over classes; classes absent from both maps are excluded."""
        union = self.tp + self.fp + self.fn
        present = union > 0
        if not present.any():
            return 0.0
        iou = self.tp[present] / union[present]
        return float(iou.mean())


def _validate_labels(arr: np.ndarray, nc: int, name: str) -> None:
    if arr.size and (arr.min() < 0 or arr.max() >= nc):
        bad = arr[(arr < 0) | (arr >= nc)].flat[0]
        raise InvalidClassId(f"{name} contains class id {int(bad)} outside [0, {nc})")


def confusion_counts(pred, gt, nc: int, ignore_id: int | None = None) -> ConfusionCounts:
    """Pixel confusion counts between two label maps.

    Pixels whose ground truth equals ``ignore_id`` are excluded entirely.
    """
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt must have the same number of pixels")
    if ignore_id is not None:
        keep = gt != ignore_id
        pred, gt = pred[keep], gt[keep]
    _validate_labels(gt, nc, "gt")
    _validate_labels(pred, nc, "pred")
    joint = np.bincount(gt * nc + pred, minlength=nc * nc).reshape(nc, nc)
    tp = np.diag(joint).copy()
    fn = joint.sum(axis=1) - tp
    fp = joint.sum(axis=0) - tp
    return ConfusionCounts(tp=tp, fp=fp, fn=fn)


def miou(pred, gt, nc: int, ignore_id: int | None = None) -> float:
    """Mean over classes of TP / (TP + FN + FP); zero-union classes excluded."""
    return confusion_counts(pred, gt, nc, ignore_id).miou()


def rmse(pred, gt, mask=None) -> float:
    """Root of the masked mean squared depth error, in mm."""
    with torch.no_grad():
        mse = depth_loss(torch.as_tensor(pred, dtype=torch.float64),
                         torch.as_tensor(gt, dtype=torch.float64), mask)
    return math.sqrt(float(mse))
