"""Semantic segmentation branch over the feature pyramid.

Small-scale context comes from dense prediction cells (multi-rate atrous
depthwise-separable convolutions) on the x32 and x16 levels; large-scale
detail from plain 3x3 stacks on the x8 and x4 levels.  Mismatch-correction
stacks upsample coarse maps 2x and fuse additively down the pyramid, after
which the four maps are concatenated at x4 and projected to class logits.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import FeaturePyramid, group_norm

HEAD_CHANNELS = 128

# Per-branch (height, width) dilation rates of the dense prediction cell.
DPC_RATES = ((1, 6), (1, 1), (6, 21), (18, 15), (6, 3))


def _conv_gn_relu(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        group_norm(out_ch),
        nn.ReLU(inplace=True),
    )


def _run_2d(module, x):
    if x.dim() == 3:
        return module(x.unsqueeze(0)).squeeze(0)
    return module(x)


class LSFE(nn.Module):
    """Large-scale feature extractor: three 3x3 convolutions, 128 channels out."""

    def __init__(self, in_ch: int, channels: int = HEAD_CHANNELS):
        super().__init__()
        self.body = nn.Sequential(
            _conv_gn_relu(in_ch, channels),
            _conv_gn_relu(channels, channels),
            _conv_gn_relu(channels, channels),
        )

    def forward(self, x):
        return _run_2d(self.body, x)


class _AtrousSeparable(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, rate: tuple[int, int]):
        super().__init__()
        self.depthwise = nn.Conv2d(in_ch, in_ch, 3, padding=rate,
                                   dilation=rate, groups=in_ch)
        self.pointwise = nn.Conv2d(in_ch, out_ch, 1)
        self.norm = group_norm(out_ch)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.relu(self.norm(self.pointwise(self.depthwise(x))))


class DPC(nn.Module):
    """Dense prediction cell: five atrous separable branches, concat, project."""

    def __init__(self, in_ch: int, channels: int = HEAD_CHANNELS,
                 rates: tuple[tuple[int, int], ...] = DPC_RATES):
        super().__init__()
        self.branches = nn.ModuleList(
            _AtrousSeparable(in_ch, channels, r) for r in rates)
        self.project = nn.Conv2d(channels * len(rates), channels, 1)

    def forward(self, x):
        def body(x4):
            outs = [b(x4) for b in self.branches]
            return self.project(torch.cat(outs, dim=1))
        if x.dim() == 3:
            return body(x.unsqueeze(0)).squeeze(0)
        return body(x)


class MC(nn.Module):
    """Mismatch correction: three 3x3 convolutions then bilinear 2x upsample."""

    def __init__(self, channels: int = HEAD_CHANNELS):
        super().__init__()
        self.body = nn.Sequential(
            _conv_gn_relu(channels, channels),
            _conv_gn_relu(channels, channels),
            _conv_gn_relu(channels, channels),
        )

    def forward(self, x):
        def body(x4):
            y = self.body(x4)
            return F.interpolate(y, scale_factor=2, mode="bilinear",
                                 align_corners=False)
        if x.dim() == 3:
            return body(x.unsqueeze(0)).squeeze(0)
        return body(x)


class SemanticHead(nn.Module):
    """Pyramid levels -> class logits at the original input resolution."""

    def __init__(self, fpn_channels: int, nc: int, channels: int = HEAD_CHANNELS):
        super().__init__()
        self.nc = nc
        self.dpc32 = DPC(fpn_channels, channels)
        self.dpc16 = DPC(fpn_channels, channels)
        self.lsfe8 = LSFE(fpn_channels, channels)
        self.lsfe4 = LSFE(fpn_channels, channels)
        self.mc32 = MC(channels)
        self.mc16 = MC(channels)
        self.mc8 = MC(channels)
        self.classifier = nn.Conv2d(channels * 4, nc, 1)

    def forward(self, pyr: FeaturePyramid) -> torch.Tensor:
        squeeze = pyr.p4.dim() == 3
        p4, p8, p16, p32 = (p.unsqueeze(0) if squeeze else p
                            for p in (pyr.p4, pyr.p8, pyr.p16, pyr.p32))
        f32 = self.dpc32(p32)
        f16 = self.dpc16(p16) + self.mc32(f32)
        f8 = self.lsfe8(p8) + self.mc16(f16)
        f4 = self.lsfe4(p4) + self.mc8(f8)

        up = lambda t, s: F.interpolate(t, scale_factor=s, mode="bilinear",
                                        align_corners=False)
        fused = torch.cat([up(f32, 8), up(f16, 4), up(f8, 2), f4], dim=1)
        logits = up(self.classifier(fused), 4)
        h, w = pyr.orig_hw
        logits = logits[..., :h, :w]
        return logits.squeeze(0) if squeeze else logits
