"""Run configuration: one structured document mirroring every config type.

Parsing is strict: unknown keys are rejected with their full key path, and
all defaults are materialized so the persisted copy of a run's config is
complete and replayable.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backbone import BackboneConfig
from .depth import FuseBlockConfig
from .exceptions import ConfigError
from .harness import LossWeights, OptimConfig


@dataclass
class DataSection:
    source: str = "toy"          # "toy" generates scenes; "directory" loads a layout
    root: str = ""               # directory source; SEMSEGDEPTH_DATA_ROOT if empty
    n_samples: int = 16
    nc: int = 4
    height: int = 64
    width: int = 64
    counts: tuple[int, int, int] = (8, 4, 4)
    max_range_mm: float = 50_000.0
    n_points: int = 8000
    sparsify_seed: int = 0
    resample_sparse: bool = False

    def __post_init__(self):
        if self.source not in ("toy", "directory"):
            raise ValueError(f"source must be 'toy' or 'directory', got '{self.source}'")


@dataclass
class VariantSection:
    name: str = "SemSegDepth"
    head_channels: int = 128
    supervise_preliminary: bool = False
    stop_gradient_depth: bool = False
    raw_logits_to_depth: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/run"
    data: DataSection = field(default_factory=DataSection)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fuse: FuseBlockConfig = field(default_factory=FuseBlockConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    variant: VariantSection = field(default_factory=VariantSection)


_SECTIONS = {
    "data": DataSection,
    "backbone": BackboneConfig,
    "fuse": FuseBlockConfig,
    "optim": OptimConfig,
    "loss": LossWeights,
    "variant": VariantSection,
}


def _build_section(cls, mapping, path: str):
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError(path, "expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in mapping.items():
        full = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(full)
        default = names[key].default
        if isinstance(default, tuple) or (
                names[key].default_factory is not dataclasses.MISSING
                and isinstance(names[key].default_factory(), tuple)):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(full, "expected a list")
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path or cls.__name__, str(exc)) from exc


def config_from_dict(doc: dict) -> RunConfig:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("", "config root must be a mapping")
    kwargs = {}
    for key, value in doc.items():
        if key in _SECTIONS:
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
        elif key in ("seed", "out_dir"):
            kwargs[key] = value
        else:
            raise ConfigError(key)
    return RunConfig(**kwargs)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(str(path), "config file does not exist")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"invalid YAML: {exc}") from exc
    return config_from_dict(doc)


def config_to_dict(cfg: RunConfig) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def save_config(cfg: RunConfig, path: str | Path) -> None:
    """Persist the fully materialized config (all defaults expanded)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))


def config_digest(cfg: RunConfig) -> str:
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
