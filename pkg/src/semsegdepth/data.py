"""Sample types, the sparsification/cropping protocol, and procedural toy scenes.

Depth is carried in millimeters everywhere, with 0 as the invalid/no-measurement
sentinel.  RGB is float32 in [0, 1], channel-first.  All operations are pure
given their seed/config, so they are safe to call from concurrent workers.
"""

from __future__ import annotations

import colorsys
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image

from .exceptions import (
    InsufficientSamples,
    MissingFile,
    NoEligiblePoints,
    OutOfBounds,
    UnknownColorWarning,
)

DEFAULT_MAX_RANGE_MM = 50_000.0
DEFAULT_N_POINTS = 8000

# Virtual KITTI 2 stores depth as 16-bit PNG in centimeters.
CM_TO_MM = 10.0


class Intrinsics(NamedTuple):
    fx: float
    fy: float
    cx: float
    cy: float


@dataclass
class ImageSample:
    """One training/eval record.

    rgb: float32 (3, H, W) in [0, 1]
    sparse_depth: float32 (H, W) mm, 0 = no measurement
    dense_depth_gt: float32 (H, W) mm, 0 = invalid (None if unavailable)
    semantic_gt: int64 (H, W) class ids in [0, nc) (None if unavailable)
    """

    rgb: np.ndarray
    sparse_depth: np.ndarray
    dense_depth_gt: np.ndarray | None
    semantic_gt: np.ndarray | None
    intrinsics: Intrinsics
    sample_id: str

    @property
    def hw(self) -> tuple[int, int]:
        return self.rgb.shape[-2], self.rgb.shape[-1]

    def validate(self, nc: int | None = None,
                 max_range_mm: float = DEFAULT_MAX_RANGE_MM) -> None:
        """Check the record invariants; raises AssertionError on violation."""
        h, w = self.hw
        assert self.rgb.shape == (3, h, w)
        assert self.sparse_depth.shape == (h, w)
        measured = self.sparse_depth > 0
        assert np.all(self.sparse_depth[measured] <= max_range_mm)
        if self.dense_depth_gt is not None:
            assert self.dense_depth_gt.shape == (h, w)
            assert np.array_equal(self.sparse_depth[measured],
                                  self.dense_depth_gt[measured])
        if self.semantic_gt is not None:
            assert self.semantic_gt.shape == (h, w)
            assert self.semantic_gt.min() >= 0
            if nc is not None:
                assert self.semantic_gt.max() < nc


@dataclass
class DatasetSplit:
    train: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)

    def sections(self) -> dict[str, list[str]]:
        return {"train": self.train, "val": self.val, "test": self.test}


@dataclass
class SparsifyConfig:
    max_range_mm: float = DEFAULT_MAX_RANGE_MM
    n_points: int = DEFAULT_N_POINTS
    seed: int = 0

    def __post_init__(self):
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        if self.max_range_mm <= 0:
            raise ValueError("max_range_mm must be > 0")


def sparsify_depth(dense: np.ndarray, cfg: SparsifyConfig) -> np.ndarray:
    """Simulate a range-limited sparse sensor from a dense depth map.

    Keeps ``min(cfg.n_points, #eligible)`` pixels, chosen uniformly at random
    without replacement among pixels with ``0 < value <= max_range_mm``;
    everything else is zeroed.  Deterministic given ``cfg.seed``.
    """
    dense = np.asarray(dense)
    eligible = np.flatnonzero((dense > 0) & (dense <= cfg.max_range_mm))
    if eligible.size == 0:
        raise NoEligiblePoints("no depth pixel within range")
    n = min(cfg.n_points, eligible.size)
    rng = np.random.default_rng(cfg.seed)
    chosen = rng.choice(eligible, size=n, replace=False)
    out = np.zeros_like(dense)
    out.flat[chosen] = dense.flat[chosen]
    return out


def crop_sample(s: ImageSample, h: int, w: int, anchor: tuple[int, int]) -> ImageSample:
    """Crop every array identically and shift the principal point accordingly."""
    r0, c0 = anchor
    src_h, src_w = s.hw
    if r0 < 0 or c0 < 0 or r0 + h > src_h or c0 + w > src_w:
        raise OutOfBounds(
            f"window {h}x{w} at {anchor} exceeds source {src_h}x{src_w}")
    win = (slice(r0, r0 + h), slice(c0, c0 + w))
    intr = Intrinsics(s.intrinsics.fx, s.intrinsics.fy,
                      s.intrinsics.cx - c0, s.intrinsics.cy - r0)
    return replace(
        s,
        rgb=s.rgb[:, win[0], win[1]].copy(),
        sparse_depth=s.sparse_depth[win].copy(),
        dense_depth_gt=None if s.dense_depth_gt is None else s.dense_depth_gt[win].copy(),
        semantic_gt=None if s.semantic_gt is None else s.semantic_gt[win].copy(),
        intrinsics=intr,
    )


# ---------------------------------------------------------------------------
# Procedural toy scenes
# ---------------------------------------------------------------------------

_BASE_COLORS = [
    (0.36, 0.32, 0.28),   # background / ground
    (0.78, 0.22, 0.22),
    (0.22, 0.38, 0.80),
    (0.85, 0.75, 0.25),
    (0.55, 0.28, 0.68),
    (0.25, 0.70, 0.65),
    (0.88, 0.50, 0.18),
    (0.60, 0.78, 0.32),
]

# Tilt of the backdrop plane; chosen so every ray in a frame with fy = W,
# cy = H/2 and H <= 2W intersects it in front of the camera.
_PLANE_TILT_RAD = np.deg2rad(25.0)


def class_color(k: int) -> tuple[float, float, float]:
    """Flat-shading base color for class ``k`` (stable, independent of nc)."""
    if k < len(_BASE_COLORS):
        return _BASE_COLORS[k]
    hue = (k * 0.61803398875) % 1.0
    return colorsys.hsv_to_rgb(hue, 0.65, 0.85)


def label_color(k: int) -> tuple[int, int, int]:
    """uint8 color encoding class ``k`` in materialized semantic images."""
    if k == 0:
        return (0, 0, 0)
    hue = (k * 0.61803398875) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.9, 0.95)
    return (int(round(r * 255)), int(round(g * 255)), int(round(b * 255)))


def toy_class_map(nc: int) -> dict[tuple[int, int, int], int]:
    """Color -> class id map matching :func:`label_color`."""
    m = {label_color(k): k for k in range(nc)}
    if len(m) != nc:
        raise ValueError(f"label colors collide for nc={nc}")
    return m


def generate_toy_scene(seed: int, nc: int, h: int, w: int) -> ImageSample:
    """Render a deterministic scene with exact analytic ground truth.

    A textured tilted ground plane fills the frame; 1-4 axis-aligned,
    fronto-parallel boxes sit in front of it at known depths.  Depth comes
    from the pinhole model with intrinsics (fx=w, fy=w, cx=w/2, cy=h/2),
    so unproject/reproject round-trips are exact.  Classes: 0 = ground,
    boxes cycle through 1..nc-1.
    """
    if nc < 2:
        raise ValueError("nc must be >= 2")
    if h < 16 or w < 16:
        raise ValueError("h and w must be >= 16")
    rng = np.random.default_rng(seed)
    intr = Intrinsics(float(w), float(w), w / 2.0, h / 2.0)

    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    dy = (vv - intr.cy) / intr.fy
    # Ray (dx, dy, 1) meets the plane n.X = d with n = (0, sin t, cos t) at
    # z = d / (dy sin t + cos t); the denominator stays positive for every
    # pixel because |dy| <= H / (2W) and the tilt is mild.
    sin_t, cos_t = np.sin(_PLANE_TILT_RAD), np.cos(_PLANE_TILT_RAD)
    z_center = rng.uniform(6.0, 10.0)
    plane_d = z_center * cos_t
    depth_m = plane_d / (dy * sin_t + cos_t)

    semantic = np.zeros((h, w), dtype=np.int64)
    n_boxes = int(rng.integers(1, 5))
    boxes = []
    for i in range(n_boxes):
        cls = 1 + (i % (nc - 1))
        bh = int(rng.integers(h // 5, h // 3 + 1))
        bw = int(rng.integers(w // 5, w // 3 + 1))
        r0 = int(rng.integers(0, h - bh + 1))
        c0 = int(rng.integers(0, w - bw + 1))
        z = float(rng.uniform(2.0, 5.0))
        boxes.append((z, r0, c0, bh, bw, cls))
    # Painter's order: far boxes first so nearer ones overwrite.
    for z, r0, c0, bh, bw, cls in sorted(boxes, key=lambda b: -b[0]):
        depth_m[r0:r0 + bh, c0:c0 + bw] = z
        semantic[r0:r0 + bh, c0:c0 + bw] = cls

    rgb = np.empty((3, h, w), dtype=np.float64)
    for ch in range(3):
        base = np.zeros((h, w))
        for k in range(nc):
            base[semantic == k] = class_color(k)[ch]
        rgb[ch] = base
    checker = 0.06 * (((uu // 8).astype(int) + (vv // 8).astype(int)) % 2)
    rgb += np.where(semantic == 0, checker, 0.0)
    rgb += rng.normal(0.0, 0.02, size=rgb.shape)
    rgb = np.clip(rgb, 0.0, 1.0)

    return ImageSample(
        rgb=rgb.astype(np.float32),
        sparse_depth=np.zeros((h, w), dtype=np.float32),
        dense_depth_gt=(depth_m * 1000.0).astype(np.float32),
        semantic_gt=semantic,
        intrinsics=intr,
        sample_id=f"toy_{seed:06d}",
    )


def make_toy_dataset(n: int, seed: int, nc: int, h: int, w: int,
                     sparsify: SparsifyConfig | None = None) -> list[ImageSample]:
    """Generate ``n`` toy scenes and fill their sparse depth channels."""
    samples = []
    for i in range(n):
        s = generate_toy_scene(seed + i, nc, h, w)
        if sparsify is not None:
            cfg = replace(sparsify, seed=sparsify.seed + i)
            s.sparse_depth = sparsify_depth(s.dense_depth_gt, cfg)
        samples.append(s)
    return samples


# ---------------------------------------------------------------------------
# Virtual-KITTI-2-format ingest
# ---------------------------------------------------------------------------


def load_vkitti2_sample(rgb_path: str | Path,
                        depth_path: str | Path,
                        semantic_path: str | Path,
                        class_map: dict[tuple[int, int, int], int],
                        intrinsics: Intrinsics | None = None,
                        background_id: int = 0,
                        sample_id: str | None = None) -> ImageSample:
    """Load one record stored in the Virtual KITTI 2 file conventions.

    Depth is a 16-bit single-channel PNG in centimeters and is converted to
    millimeters.  The semantic image is color-coded; unmapped colors fall
    back to ``background_id`` and are surfaced as an
    :class:`UnknownColorWarning` carrying the affected pixel count.
    The sparse channel is left empty; fill it with :func:`sparsify_depth`.
    """
    for p in (rgb_path, depth_path, semantic_path):
        if not Path(p).exists():
            raise MissingFile(str(p))

    rgb = np.asarray(Image.open(rgb_path).convert("RGB"), dtype=np.float32) / 255.0
    rgb = rgb.transpose(2, 0, 1)

    depth_cm = np.asarray(Image.open(depth_path), dtype=np.float64)
    if depth_cm.ndim != 2:
        raise ValueError(f"depth image must be single-channel: {depth_path}")
    dense_mm = (depth_cm * CM_TO_MM).astype(np.float32)

    sem_rgb = np.asarray(Image.open(semantic_path).convert("RGB"))
    h, w = sem_rgb.shape[:2]
    flat = sem_rgb.reshape(-1, 3)
    colors, inverse = np.unique(flat, axis=0, return_inverse=True)
    lut = np.full(len(colors), -1, dtype=np.int64)
    for i, col in enumerate(colors):
        lut[i] = class_map.get(tuple(int(c) for c in col), -1)
    semantic = lut[inverse].reshape(h, w)
    unknown = int(np.count_nonzero(semantic < 0))
    if unknown:
        warnings.warn(UnknownColorWarning(unknown))
        semantic[semantic < 0] = background_id

    if intrinsics is None:
        intrinsics = Intrinsics(float(w), float(w), w / 2.0, h / 2.0)
    if sample_id is None:
        sample_id = Path(rgb_path).stem
    return ImageSample(
        rgb=rgb,
        sparse_depth=np.zeros((h, w), dtype=np.float32),
        dense_depth_gt=dense_mm,
        semantic_gt=semantic,
        intrinsics=intrinsics,
        sample_id=sample_id,
    )


def split_dataset(ids: list[str], counts: tuple[int, int, int], seed: int) -> DatasetSplit:
    """Deterministic seeded shuffle into disjoint train/val/test lists."""
    n_train, n_val, n_test = counts
    total = n_train + n_val + n_test
    if total > len(ids):
        raise InsufficientSamples(
            f"requested {total} samples from {len(ids)} ids")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    return DatasetSplit(
        train=order[:n_train],
        val=order[n_train:n_train + n_val],
        test=order[n_train + n_val:total],
    )
