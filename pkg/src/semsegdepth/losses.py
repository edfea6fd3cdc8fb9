"""Training losses: per-pixel cross-entropy, masked squared depth error, and
their sum.

All functions are torch-based and differentiable; array-likes are accepted
and converted.  Depth is in millimeters, so the depth loss is in mm².
"""

from __future__ import annotations

import torch

from .exceptions import EmptyMask, InvalidClassId


def log_softmax(x, dim: int = 0) -> torch.Tensor:
    """Numerically stable log-softmax (max-subtraction form)."""
    x = torch.as_tensor(x)
    shifted = x - x.max(dim=dim, keepdim=True).values
    return shifted - shifted.exp().sum(dim=dim, keepdim=True).log()


def semantic_loss(logits, gt, ignore_id: int | None = None) -> torch.Tensor:
    """Mean over non-ignored pixels of the per-pixel cross-entropy.

    ``logits`` is (nc, H, W); ``gt`` is (H, W) integer class ids.  Pixels
    equal to ``ignore_id`` are excluded; with zero remaining pixels the loss
    is defined as 0.
    """
    logits = torch.as_tensor(logits)
    gt = torch.as_tensor(gt, dtype=torch.long)
    nc = logits.shape[0]
    keep = torch.ones_like(gt, dtype=torch.bool) if ignore_id is None else gt != ignore_id
    valid = gt[keep]
    if valid.numel() and (valid.min() < 0 or valid.max() >= nc):
        bad = valid[(valid < 0) | (valid >= nc)][0]
        raise InvalidClassId(f"class id {int(bad)} outside [0, {nc})")
    if not valid.numel():
        return logits.sum() * 0.0
    logp = log_softmax(logits, dim=0)
    flat = logp.reshape(nc, -1)
    idx = keep.reshape(-1)
    picked = flat[:, idx].gather(0, valid.reshape(1, -1))
    return -picked.mean()


def depth_loss(pred, gt, mask=None) -> torch.Tensor:
    """Mean squared error over masked pixels (mm²); mask defaults to gt > 0."""
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    if mask is None:
        mask = gt > 0
    else:
        mask = torch.as_tensor(mask, dtype=torch.bool)
    if not bool(mask.any()):
        raise EmptyMask("no valid depth pixels")
    diff = pred[mask] - gt[mask]
    return (diff * diff).mean()


def joint_loss(ls, ld):
    """Sum of the semantic and depth losses."""
    return ls + ld
