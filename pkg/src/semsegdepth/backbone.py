"""Residual feature extractor wrapped in a feature pyramid.

Four output maps at x4, x8, x16, x32 downsampling, all with the same channel
count.  Normalization is group-style (batch-independent) so forwards are pure
functions of the parameters, which keeps tiny-batch training and
finite-difference checks well behaved.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ShapeError

STRIDE_LEVELS = (4, 8, 16, 32)
_STAGE_BASE_WIDTHS = (64, 128, 256, 512)
_EXPANSION = 4


def _scaled(c: int, m: float) -> int:
    return max(4, int(round(c * m)))


def group_norm(channels: int) -> nn.GroupNorm:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return nn.GroupNorm(g, channels)
    return nn.GroupNorm(1, channels)


@dataclass
class BackboneConfig:
    width_multiplier: float = 1.0
    stage_block_counts: tuple[int, int, int, int] = (3, 4, 6, 3)
    fpn_channels: int = 256

    def __post_init__(self):
        if any(c < 1 for c in self.stage_block_counts):
            raise ValueError("stage_block_counts must all be >= 1")
        if self.fpn_channels < 1 or self.width_multiplier <= 0:
            raise ValueError("fpn_channels and width_multiplier must be positive")


def micro_backbone_config(fpn_channels: int = 16) -> BackboneConfig:
    """Smallest sensible backbone, for gradient checks and fast tests."""
    return BackboneConfig(width_multiplier=1 / 16,
                          stage_block_counts=(1, 1, 1, 1),
                          fpn_channels=fpn_channels)


@dataclass
class FeaturePyramid:
    """Multi-scale features; spatial dims are the padded input size / stride."""

    p4: torch.Tensor
    p8: torch.Tensor
    p16: torch.Tensor
    p32: torch.Tensor
    orig_hw: tuple[int, int]
    padded_hw: tuple[int, int]

    def levels(self) -> list[tuple[int, torch.Tensor]]:
        return [(4, self.p4), (8, self.p8), (16, self.p16), (32, self.p32)]


class Bottleneck(nn.Module):
    """1x1 -> 3x3 -> 1x1 residual block with 4x channel expansion."""

    def __init__(self, in_ch: int, planes: int, stride: int = 1):
        super().__init__()
        out_ch = planes * _EXPANSION
        self.conv1 = nn.Conv2d(in_ch, planes, 1, bias=False)
        self.norm1 = group_norm(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=stride, padding=1, bias=False)
        self.norm2 = group_norm(planes)
        self.conv3 = nn.Conv2d(planes, out_ch, 1, bias=False)
        self.norm3 = group_norm(out_ch)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                group_norm(out_ch))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        y = self.relu(self.norm1(self.conv1(x)))
        y = self.relu(self.norm2(self.conv2(y)))
        y = self.norm3(self.conv3(y))
        return self.relu(y + self.shortcut(x))


def pad_to_multiple(x: torch.Tensor, multiple: int = 32) -> torch.Tensor:
    """Reflect-pad the bottom/right edges up to the next size multiple."""
    h, w = x.shape[-2], x.shape[-1]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return x
    mode = "reflect" if (ph < h and pw < w) else "replicate"
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    x = F.pad(x, (0, pw, 0, ph), mode=mode)
    return x.squeeze(0) if squeeze else x


class ResNetFPN(nn.Module):
    """Stem + four bottleneck stages + top-down pyramid with lateral 1x1s.

    ``forward`` accepts (3, H, W) or (B, 3, H, W).  Inputs whose size is not
    a multiple of 32 are reflect-padded first; pass ``pad=False`` to demand
    exact divisibility instead (raises :class:`ShapeError`).
    """

    def __init__(self, cfg: BackboneConfig | None = None):
        super().__init__()
        cfg = cfg or BackboneConfig()
        self.cfg = cfg
        m = cfg.width_multiplier
        stem_ch = _scaled(64, m)
        self.stem = nn.Sequential(
            nn.Conv2d(3, stem_ch, 7, stride=2, padding=3, bias=False),
            group_norm(stem_ch),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.stages = nn.ModuleList()
        in_ch = stem_ch
        stage_out = []
        for i, (base, blocks) in enumerate(zip(_STAGE_BASE_WIDTHS, cfg.stage_block_counts)):
            planes = _scaled(base, m)
            layers = []
            for b in range(blocks):
                stride = 2 if (i > 0 and b == 0) else 1
                layers.append(Bottleneck(in_ch, planes, stride=stride))
                in_ch = planes * _EXPANSION
            self.stages.append(nn.Sequential(*layers))
            stage_out.append(in_ch)
        c = cfg.fpn_channels
        self.lateral = nn.ModuleList([nn.Conv2d(s, c, 1) for s in stage_out])
        self.smooth = nn.ModuleList([nn.Conv2d(c, c, 3, padding=1) for _ in stage_out])

    def forward(self, rgb: torch.Tensor, pad: bool = True) -> FeaturePyramid:
        squeeze = rgb.dim() == 3
        x = rgb.unsqueeze(0) if squeeze else rgb
        orig_hw = (x.shape[-2], x.shape[-1])
        if orig_hw[0] % 32 or orig_hw[1] % 32:
            if not pad:
                raise ShapeError(
                    f"input {orig_hw[0]}x{orig_hw[1]} is not divisible by 32")
            x = pad_to_multiple(x, 32)
        padded_hw = (x.shape[-2], x.shape[-1])

        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)

        tops = [None] * 4
        tops[3] = self.lateral[3](feats[3])
        for i in (2, 1, 0):
            up = F.interpolate(tops[i + 1], scale_factor=2, mode="nearest")
            tops[i] = self.lateral[i](feats[i]) + up
        maps = [self.smooth[i](tops[i]) for i in range(4)]
        if squeeze:
            maps = [p.squeeze(0) for p in maps]
        return FeaturePyramid(*maps, orig_hw=orig_hw, padded_hw=padded_hw)
