"""Depth completion branch: sparse depth + RGB (+ semantic guidance) to a
fully dense map.

Sparse measurements are unprojected to 3D points; a stack of fuse blocks
pairs plain 2D convolutions with a continuous convolution over the point
neighborhood graph, scattered back onto the image grid and fused additively.
Neighbor search is exact with ties broken by lowest point index, via brute
force for small clouds and a uniform-grid spatial hash above
``BRUTE_FORCE_MAX`` points; both paths return identical results.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import group_norm
from .data import Intrinsics
from .exceptions import EmptySparseDepth

BRUTE_FORCE_MAX = 4096
MM_PER_M = 1000.0


@dataclass
class PointSet:
    """Unprojected sparse measurements: camera-frame meters plus source pixels."""

    points: torch.Tensor       # (K, 3) float, meters
    pixel_index: torch.Tensor  # (K,) long, row * W + col
    hw: tuple[int, int]

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class FuseBlockConfig:
    n_blocks: int = 2
    knn_k: int = 8
    kernel_mlp_widths: tuple[int, ...] = (32, 32)
    channels_2d: int = 32

    def __post_init__(self):
        if self.n_blocks < 1 or self.knn_k < 1:
            raise ValueError("n_blocks and knn_k must be >= 1")


def unproject(sparse_mm, intr: Intrinsics) -> PointSet:
    """Lift nonzero depth pixels to 3D camera-frame points (meters).

    Pixel (u, v) with depth d maps to ((u-cx)z/fx, (v-cy)z/fy, z) with
    z = d / 1000; ``pixel_index`` records v*W + u in row-major scan order.
    """
    t = torch.as_tensor(sparse_mm)
    if t.dim() != 2:
        raise ValueError("sparse depth must be (H, W)")
    h, w = t.shape
    flat = t.reshape(-1)
    idx = torch.nonzero(flat > 0, as_tuple=False).reshape(-1)
    if idx.numel() == 0:
        raise EmptySparseDepth("sparse depth has no measurements")
    dtype = t.dtype if t.is_floating_point() else torch.float32
    z = flat[idx].to(dtype) / MM_PER_M
    u = (idx % w).to(dtype)
    v = torch.div(idx, w, rounding_mode="floor").to(dtype)
    x = (u - intr.cx) * z / intr.fx
    y = (v - intr.cy) * z / intr.fy
    return PointSet(points=torch.stack([x, y, z], dim=-1),
                    pixel_index=idx, hw=(h, w))


def reproject(ps: PointSet, intr: Intrinsics) -> tuple[torch.Tensor, torch.Tensor]:
    """Inverse of :func:`unproject`: (u, v) pixel coordinates and depth in mm."""
    x, y, z = ps.points.unbind(-1)
    u = x * intr.fx / z + intr.cx
    v = y * intr.fy / z + intr.cy
    return torch.stack([u, v], dim=-1), z * MM_PER_M


# ---------------------------------------------------------------------------
# Exact k nearest neighbors
# ---------------------------------------------------------------------------


def _knn_brute(pts: np.ndarray, k: int) -> np.ndarray:
    n = len(pts)
    out = np.empty((n, k), dtype=np.int64)
    chunk = max(1, (1 << 22) // max(n, 1))
    for s in range(0, n, chunk):
        block = pts[s:s + chunk]
        d2 = ((block[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
        # Stable sort on distance keeps original index order on ties,
        # which realizes the lowest-index tie break.
        order = np.argsort(d2, axis=1, kind="stable")
        out[s:s + chunk] = order[:, :k]
    return out


def _ring_cells(center: np.ndarray, r: int):
    if r == 0:
        yield tuple(center)
        return
    for off in itertools.product(range(-r, r + 1), repeat=3):
        if max(abs(o) for o in off) == r:
            yield (center[0] + off[0], center[1] + off[1], center[2] + off[2])


def _knn_grid(pts: np.ndarray, k: int) -> np.ndarray:
    n = len(pts)
    pmin = pts.min(axis=0)
    extent = pts.max(axis=0) - pmin
    volume = float(np.prod(np.maximum(extent, 1e-9)))
    # Aim for a couple of points per cell.
    cell = max((2.0 * volume / n) ** (1.0 / 3.0), 1e-9)
    coords = np.floor((pts - pmin) / cell).astype(np.int64)
    buckets: dict[tuple[int, int, int], list[int]] = defaultdict(list)
    for i, c in enumerate(map(tuple, coords)):
        buckets[c].append(i)

    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        cand: list[int] = []
        r = 0
        while True:
            for c in _ring_cells(coords[i], r):
                hit = buckets.get(c)
                if hit:
                    cand.extend(hit)
            if len(cand) >= k:
                ci = np.asarray(cand)
                d2 = ((pts[ci] - pts[i]) ** 2).sum(axis=1)
                order = np.lexsort((ci, d2))[:k]
                kth = d2[order[-1]]
                # Cells in ring r+1 hold points at distance >= r * cell;
                # strict comparison so boundary ties are still examined.
                if (r * cell) ** 2 > kth:
                    out[i] = ci[order]
                    break
            r += 1
    return out


def knn_indices(points, k: int, method: str = "auto") -> np.ndarray:
    """Indices of the k nearest neighbors per point (self included).

    Exact in all paths; ties broken by lowest point index.  ``k`` is clamped
    to the cloud size.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    k = min(k, len(pts))
    if method == "brute" or (method == "auto" and len(pts) <= BRUTE_FORCE_MAX):
        return _knn_brute(pts, k)
    if method in ("grid", "auto"):
        return _knn_grid(pts, k)
    raise ValueError(f"unknown knn method: {method}")


# ---------------------------------------------------------------------------
# Continuous convolution and fuse blocks
# ---------------------------------------------------------------------------


class KernelMLP(nn.Module):
    """Maps a relative 3D offset to per-channel kernel weights."""

    def __init__(self, channels: int, hidden: tuple[int, ...] = (32, 32)):
        super().__init__()
        layers: list[nn.Module] = []
        in_d = 3
        for h in hidden:
            layers += [nn.Linear(in_d, h), nn.ReLU(inplace=True)]
            in_d = h
        layers.append(nn.Linear(in_d, channels))
        self.net = nn.Sequential(*layers)

    def forward(self, offsets):
        return self.net(offsets)


def continuous_conv(feat: torch.Tensor, points: torch.Tensor, k: int,
                    kernel: KernelMLP,
                    neighbor_idx: np.ndarray | None = None) -> torch.Tensor:
    """Neighborhood-weighted feature mixing over an irregular point set.

    For each point i: mean over its k nearest neighbors j of
    ``kernel(p_j - p_i) * feat_j`` (elementwise).  Differentiable w.r.t.
    features and kernel parameters; neighbor selection is discrete.
    """
    if neighbor_idx is None:
        neighbor_idx = knn_indices(points.detach().cpu().numpy(), k)
    idx = torch.as_tensor(neighbor_idx, dtype=torch.long, device=feat.device)
    offsets = points[idx] - points.unsqueeze(1)        # (K, k, 3)
    weights = kernel(offsets.to(feat.dtype))           # (K, k, C)
    gathered = feat[idx]                               # (K, k, C)
    return (weights * gathered).mean(dim=1)


class FuseBlock(nn.Module):
    """Parallel 2D conv stack and point-domain continuous convolution.

    The 3D branch gathers grid features at the measurement pixels, mixes them
    over the point neighborhood graph, and scatters back onto a zero canvas;
    branches are fused by elementwise sum with a residual connection.
    """

    def __init__(self, channels: int, cfg: FuseBlockConfig):
        super().__init__()
        self.knn_k = cfg.knn_k
        self.conv2d = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            group_norm(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
        )
        self.kernel = KernelMLP(channels, cfg.kernel_mlp_widths)

    def forward(self, feat2d: torch.Tensor, pts: PointSet,
                neighbor_idx: np.ndarray | None = None) -> torch.Tensor:
        c, h, w = feat2d.shape
        a = self.conv2d(feat2d.unsqueeze(0)).squeeze(0)
        flat = feat2d.reshape(c, -1)
        gathered = flat[:, pts.pixel_index].transpose(0, 1)      # (K, C)
        mixed = continuous_conv(gathered, pts.points, self.knn_k,
                                self.kernel, neighbor_idx)
        canvas = feat2d.new_zeros(c, h * w)
        canvas[:, pts.pixel_index] = mixed.transpose(0, 1)
        return feat2d + a + canvas.reshape(c, h, w)


def _inverse_softplus(y: float) -> float:
    return math.log(math.expm1(y))


class DepthHead(nn.Module):
    """Sparse depth + RGB (+ semantic probabilities) -> dense depth map (mm).

    Two input stacks of two 3x3 convolutions each (one over the concatenated
    inputs, one over sparse depth alone) are concatenated and refined by
    ``n_blocks`` fuse blocks and two final convolutions.  The output passes
    through a softplus rectifier, so predictions stay nonnegative and
    differentiable.  ``sem`` is consumed as handed in (softmax probabilities
    or a one-hot ground-truth encoding, per variant).
    """

    def __init__(self, sem_channels: int, cfg: FuseBlockConfig | None = None,
                 max_range_mm: float = 50_000.0, init_depth_mm: float = 5000.0):
        super().__init__()
        cfg = cfg or FuseBlockConfig()
        self.cfg = cfg
        self.sem_channels = sem_channels
        self.max_range_mm = max_range_mm
        c = cfg.channels_2d

        def stack(in_ch):
            return nn.Sequential(
                nn.Conv2d(in_ch, c, 3, padding=1), group_norm(c), nn.ReLU(inplace=True),
                nn.Conv2d(c, c, 3, padding=1), group_norm(c), nn.ReLU(inplace=True),
            )

        self.stack_main = stack(1 + 3 + sem_channels)
        self.stack_sparse = stack(1)
        self.blocks = nn.ModuleList(
            FuseBlock(2 * c, cfg) for _ in range(cfg.n_blocks))
        self.refine1 = nn.Sequential(
            nn.Conv2d(2 * c, c, 3, padding=1), group_norm(c), nn.ReLU(inplace=True))
        self.refine2 = nn.Conv2d(c, 1, 3, padding=1)
        # Start predictions near a plausible mid-range depth instead of zero.
        nn.init.constant_(self.refine2.bias,
                          _inverse_softplus(init_depth_mm / MM_PER_M))

    def forward(self, rgb: torch.Tensor, sparse_mm: torch.Tensor,
                sem: torch.Tensor | None, intrinsics: Intrinsics,
                points: PointSet | None = None) -> torch.Tensor:
        if points is None:
            points = unproject(sparse_mm, intrinsics)
        sparse_n = (sparse_mm / self.max_range_mm).unsqueeze(0).to(rgb.dtype)
        parts = [sparse_n, rgb]
        if self.sem_channels:
            if sem is None:
                raise ValueError("head was built with a semantic input")
            parts.append(sem.to(rgb.dtype))
        a = self.stack_main(torch.cat(parts, dim=0).unsqueeze(0)).squeeze(0)
        b = self.stack_sparse(sparse_n.unsqueeze(0)).squeeze(0)
        x = torch.cat([a, b], dim=0)
        idx = knn_indices(points.points.detach().cpu().numpy(),
                          min(self.cfg.knn_k, len(points)))
        for block in self.blocks:
            x = block(x, points, neighbor_idx=idx)
        x = self.refine2(self.refine1(x.unsqueeze(0))).squeeze(0).squeeze(0)
        return F.softplus(x) * MM_PER_M
