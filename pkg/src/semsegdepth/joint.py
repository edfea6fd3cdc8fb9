"""Joint branch: refine preliminary semantic logits with dense depth."""

from __future__ import annotations

import torch
from torch import nn

from .backbone import group_norm
from .exceptions import ShapeMismatch


class JointHead(nn.Module):
    """Four 3x3 convolutions over concatenated logits and normalized depth.

    Depth is divided by ``max_range_mm`` before concatenation so its scale
    is commensurate with logit-scale channels.  Differentiable through both
    inputs.
    """

    def __init__(self, nc: int, max_range_mm: float = 50_000.0,
                 widths: tuple[int, int, int] = (64, 64, 64)):
        super().__init__()
        self.max_range_mm = max_range_mm
        w1, w2, w3 = widths
        self.body = nn.Sequential(
            nn.Conv2d(nc + 1, w1, 3, padding=1), group_norm(w1), nn.ReLU(inplace=True),
            nn.Conv2d(w1, w2, 3, padding=1), group_norm(w2), nn.ReLU(inplace=True),
            nn.Conv2d(w2, w3, 3, padding=1), group_norm(w3), nn.ReLU(inplace=True),
            nn.Conv2d(w3, nc, 3, padding=1),
        )

    def forward(self, sem_prelim: torch.Tensor, depth_mm: torch.Tensor) -> torch.Tensor:
        if sem_prelim.shape[-2:] != depth_mm.shape[-2:]:
            raise ShapeMismatch(
                f"logits {tuple(sem_prelim.shape[-2:])} vs depth {tuple(depth_mm.shape[-2:])}")
        d = (depth_mm / self.max_range_mm).unsqueeze(0).to(sem_prelim.dtype)
        x = torch.cat([sem_prelim, d], dim=0)
        return self.body(x.unsqueeze(0)).squeeze(0)
