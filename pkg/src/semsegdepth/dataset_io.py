"""On-disk dataset layout and the split-file format.

Layout (shared by toy and Virtual-KITTI-2-format data, so downstream code is
source-agnostic)::

    <root>/rgb/<id>.png        8-bit RGB
    <root>/depth/<id>.png      16-bit grayscale, centimeters (dense GT)
    <root>/sparse/<id>.png     16-bit grayscale, centimeters (sparse input)
    <root>/semantic/<id>.png   8-bit RGB, color-coded class ids
    <root>/split.txt           one id per line under [train]/[val]/[test]
    <root>/meta.json           nc, sizes, seed, class colors (toy datasets)

Materialization quantizes depth to whole centimeters (the 16-bit storage
unit); sparse values are derived from the quantized dense map so the
sparse == dense invariant survives the round trip.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .data import DatasetSplit, ImageSample, Intrinsics, label_color, toy_class_map
from .exceptions import MissingFile

SPLIT_FILENAME = "split.txt"
META_FILENAME = "meta.json"


def write_split_file(path: str | Path, split: DatasetSplit) -> None:
    lines = []
    for name, ids in split.sections().items():
        lines.append(f"[{name}]")
        lines.extend(ids)
    Path(path).write_text("\n".join(lines) + "\n")


def read_split_file(path: str | Path) -> DatasetSplit:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    split = DatasetSplit()
    section: list[str] | None = None
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = split.sections()[line[1:-1]]
        elif section is not None:
            section.append(line)
    return split


def _write_depth_png(path: Path, depth_mm: np.ndarray) -> None:
    cm = np.round(np.asarray(depth_mm, dtype=np.float64) / 10.0)
    Image.fromarray(np.clip(cm, 0, 65535).astype(np.uint16)).save(path)


def write_sample(root: str | Path, s: ImageSample) -> None:
    """Materialize one sample into the directory layout."""
    root = Path(root)
    for sub in ("rgb", "depth", "sparse", "semantic"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    rgb8 = np.clip(np.round(s.rgb * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb8.transpose(1, 2, 0)).save(root / "rgb" / f"{s.sample_id}.png")

    if s.dense_depth_gt is not None:
        dense_cm = np.round(s.dense_depth_gt.astype(np.float64) / 10.0)
        _write_depth_png(root / "depth" / f"{s.sample_id}.png", s.dense_depth_gt)
        # Sparse values re-read from the quantized dense map keep the
        # sparse == dense pixel identity exact after the cm round trip.
        sparse_cm = np.where(s.sparse_depth > 0, dense_cm, 0.0)
        Image.fromarray(np.clip(sparse_cm, 0, 65535).astype(np.uint16)).save(
            root / "sparse" / f"{s.sample_id}.png")
    else:
        _write_depth_png(root / "sparse" / f"{s.sample_id}.png", s.sparse_depth)

    if s.semantic_gt is not None:
        h, w = s.semantic_gt.shape
        sem_rgb = np.zeros((h, w, 3), dtype=np.uint8)
        for k in np.unique(s.semantic_gt):
            sem_rgb[s.semantic_gt == k] = label_color(int(k))
        Image.fromarray(sem_rgb).save(root / "semantic" / f"{s.sample_id}.png")


def write_toy_dataset(root: str | Path, samples: list[ImageSample],
                      split: DatasetSplit, nc: int, meta: dict | None = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_sample(root, s)
    write_split_file(root / SPLIT_FILENAME, split)
    payload = {
        "nc": nc,
        "class_colors": {str(k): list(label_color(k)) for k in range(nc)},
    }
    if meta:
        payload.update(meta)
    (root / META_FILENAME).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_meta(root: str | Path) -> dict:
    path = Path(root) / META_FILENAME
    if not path.exists():
        raise MissingFile(str(path))
    return json.loads(path.read_text())


def dataset_class_map(root: str | Path) -> tuple[dict[tuple[int, int, int], int], int]:
    """Class map and nc from a dataset's meta file."""
    meta = read_meta(root)
    nc = int(meta["nc"])
    if "class_colors" in meta:
        cmap = {tuple(v): int(k) for k, v in meta["class_colors"].items()}
    else:
        cmap = toy_class_map(nc)
    return cmap, nc


def load_sample(root: str | Path, sample_id: str,
                class_map: dict[tuple[int, int, int], int],
                intrinsics: Intrinsics | None = None) -> ImageSample:
    """Load one materialized sample, including its sparse channel."""
    from .data import load_vkitti2_sample

    root = Path(root)
    s = load_vkitti2_sample(
        root / "rgb" / f"{sample_id}.png",
        root / "depth" / f"{sample_id}.png",
        root / "semantic" / f"{sample_id}.png",
        class_map,
        intrinsics=intrinsics,
        sample_id=sample_id,
    )
    sparse_path = root / "sparse" / f"{sample_id}.png"
    if sparse_path.exists():
        cm = np.asarray(Image.open(sparse_path), dtype=np.float64)
        s.sparse_depth = (cm * 10.0).astype(np.float32)
    return s


def load_split_samples(root: str | Path, ids: list[str]) -> list[ImageSample]:
    class_map, _ = dataset_class_map(root)
    return [load_sample(root, i, class_map) for i in ids]
