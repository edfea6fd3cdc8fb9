"""Declarative registry and builders for the nine model variants.

Variant vocabulary (stable CLI/config names, in ablation-table row order):

==================== ======== ================= ============= ===============
name                 outputs  gt inputs         loss mode     semantic branch
==================== ======== ================= ============= ===============
SemSegNet_b          sem      -                 semantic_only single
DepthNet_b           depth    -                 depth_only    none
SemNet_depth_gt      sem      sparse_depth_gt   semantic_only single
SemNet_depth_dense_gt sem     dense_depth_gt    semantic_only single
DepthNet_semantic_gt depth    semantic_gt       depth_only    none
SemSeg_Depth_a       sem+depth -                separate      single
SemSeg_Depth_b       sem+depth -                separate      two instances
SemSeg_Depth_c       sem+depth -                joint         two instances
SemSegDepth          sem+depth -                joint         single, shared
==================== ======== ================= ============= ===============

``separate`` optimizes the sum of the per-task losses; ``joint`` additionally
adds their sum as an extra term.  SemSegDepth feeds one semantic branch both
to the depth completion input and to the joint branch (shared weights);
SemSeg_Depth_b/c use a second branch instance for the depth input instead.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import BackboneConfig, ResNetFPN
from .data import ImageSample
from .depth import DepthHead, FuseBlockConfig
from .exceptions import MissingCheckpoint, MissingInput, UnknownVariant
from .joint import JointHead
from .semantic import HEAD_CHANNELS, SemanticHead

VARIANT_ORDER = [
    "SemSegNet_b",
    "DepthNet_b",
    "SemNet_depth_gt",
    "SemNet_depth_dense_gt",
    "DepthNet_semantic_gt",
    "SemSeg_Depth_a",
    "SemSeg_Depth_b",
    "SemSeg_Depth_c",
    "SemSegDepth",
]

# Published full-scale reference values, rendered next to measured numbers.
PAPER_REFERENCE = {
    "SemSegNet_b": (0.520, None),
    "DepthNet_b": (None, 580.2),
    "SemNet_depth_gt": (0.542, None),
    "SemNet_depth_dense_gt": (0.638, None),
    "DepthNet_semantic_gt": (None, 833.7),
    "SemSeg_Depth_a": (0.5421, 1497.0),
    "SemSeg_Depth_b": (0.5463, 438.4),
    "SemSeg_Depth_c": (0.5841, 429.7),
    "SemSegDepth": (0.5932, 458.2),
}


@dataclass(frozen=True)
class VariantSpec:
    name: str
    outputs: frozenset[str]
    gt_inputs: frozenset[str]
    loss_mode: str
    shares_semantic_branch: bool = False
    # Architecture toggles derived from the name.
    has_backbone: bool = True
    has_depth_branch: bool = False
    has_joint_branch: bool = False
    has_aux_semantic: bool = False
    depth_sem_source: str | None = None  # None | "shared" | "aux" | "gt"
    joint_depth_source: str | None = None  # None | "predicted" | "sparse_gt" | "dense_gt"


def _spec(name, outputs, gt_inputs, loss_mode, **kw) -> VariantSpec:
    return VariantSpec(name=name, outputs=frozenset(outputs),
                       gt_inputs=frozenset(gt_inputs), loss_mode=loss_mode, **kw)


VARIANTS: dict[str, VariantSpec] = {s.name: s for s in [
    _spec("SemSegNet_b", {"semantic"}, set(), "semantic_only"),
    _spec("DepthNet_b", {"depth"}, set(), "depth_only",
          has_backbone=False, has_depth_branch=True),
    _spec("SemNet_depth_gt", {"semantic"}, {"sparse_depth_gt"}, "semantic_only",
          has_joint_branch=True, joint_depth_source="sparse_gt"),
    _spec("SemNet_depth_dense_gt", {"semantic"}, {"dense_depth_gt"}, "semantic_only",
          has_joint_branch=True, joint_depth_source="dense_gt"),
    _spec("DepthNet_semantic_gt", {"depth"}, {"semantic_gt"}, "depth_only",
          has_backbone=False, has_depth_branch=True, depth_sem_source="gt"),
    _spec("SemSeg_Depth_a", {"semantic", "depth"}, set(), "separate",
          has_depth_branch=True, has_joint_branch=True,
          joint_depth_source="predicted"),
    _spec("SemSeg_Depth_b", {"semantic", "depth"}, set(), "separate",
          has_depth_branch=True, has_joint_branch=True, has_aux_semantic=True,
          depth_sem_source="aux", joint_depth_source="predicted"),
    _spec("SemSeg_Depth_c", {"semantic", "depth"}, set(), "joint",
          has_depth_branch=True, has_joint_branch=True, has_aux_semantic=True,
          depth_sem_source="aux", joint_depth_source="predicted"),
    _spec("SemSegDepth", {"semantic", "depth"}, set(), "joint",
          shares_semantic_branch=True, has_depth_branch=True,
          has_joint_branch=True, depth_sem_source="shared",
          joint_depth_source="predicted"),
]}


@dataclass
class ModelConfig:
    nc: int = 4
    max_range_mm: float = 50_000.0
    head_channels: int = HEAD_CHANNELS
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fuse: FuseBlockConfig = field(default_factory=FuseBlockConfig)
    # Documented toggles; defaults follow the end-to-end formulation.
    supervise_preliminary: bool = False
    stop_gradient_depth: bool = False
    raw_logits_to_depth: bool = False


@dataclass
class ModelOutput:
    semantic: torch.Tensor | None = None
    depth: torch.Tensor | None = None
    prelim: torch.Tensor | None = None


def _require(value, name: str):
    if value is None:
        raise MissingInput(name)
    return value


class VariantModel(nn.Module):
    """One concrete variant; submodule names define the checkpoint key schema:
    ``backbone.*``, ``semantic.*``, ``semantic_aux.*``, ``depth.*``, ``joint.*``.
    """

    def __init__(self, spec: VariantSpec, cfg: ModelConfig):
        super().__init__()
        self.spec = spec
        self.cfg = cfg
        if spec.has_backbone:
            self.backbone = ResNetFPN(cfg.backbone)
            self.semantic = SemanticHead(cfg.backbone.fpn_channels, cfg.nc,
                                         cfg.head_channels)
        if spec.has_aux_semantic:
            self.semantic_aux = SemanticHead(cfg.backbone.fpn_channels, cfg.nc,
                                             cfg.head_channels)
        if spec.has_depth_branch:
            sem_ch = cfg.nc if spec.depth_sem_source else 0
            self.depth = DepthHead(sem_ch, cfg.fuse,
                                   max_range_mm=cfg.max_range_mm)
        if spec.has_joint_branch:
            self.joint = JointHead(cfg.nc, max_range_mm=cfg.max_range_mm)

    def _sem_condition(self, logits: torch.Tensor) -> torch.Tensor:
        if self.cfg.raw_logits_to_depth:
            return logits
        return F.softmax(logits, dim=0)

    def forward(self, sample: ImageSample) -> ModelOutput:
        spec = self.spec
        p = next(self.parameters())
        rgb = torch.as_tensor(_require(sample.rgb, "rgb"),
                              dtype=p.dtype, device=p.device)

        prelim = None
        if spec.has_backbone:
            pyr = self.backbone(rgb)
            prelim = self.semantic(pyr)

        def sparse_tensor(field_name, require_nonempty):
            sparse = sample.sparse_depth
            if sparse is None:
                raise MissingInput(field_name)
            if require_nonempty and not (sparse > 0).any():
                raise MissingInput(field_name)
            return torch.as_tensor(sparse, dtype=p.dtype, device=p.device)

        depth_pred = None
        if spec.has_depth_branch:
            # All-zero sparse input surfaces as EmptySparseDepth downstream.
            sparse = sparse_tensor("sparse_depth", require_nonempty=False)
            if spec.depth_sem_source == "gt":
                gt = _require(sample.semantic_gt, "semantic_gt")
                sem_in = F.one_hot(torch.as_tensor(gt, dtype=torch.long),
                                   self.cfg.nc).permute(2, 0, 1).to(p.dtype)
            elif spec.depth_sem_source == "shared":
                sem_in = self._sem_condition(prelim)
            elif spec.depth_sem_source == "aux":
                sem_in = self._sem_condition(self.semantic_aux(pyr))
            else:
                sem_in = None
            depth_pred = self.depth(rgb, sparse, sem_in, sample.intrinsics)

        semantic_out = prelim
        if spec.has_joint_branch:
            if spec.joint_depth_source == "predicted":
                joint_depth = depth_pred.detach() if self.cfg.stop_gradient_depth else depth_pred
            elif spec.joint_depth_source == "sparse_gt":
                joint_depth = sparse_tensor("sparse_depth_gt", require_nonempty=True)
            else:  # dense_gt
                dense = _require(sample.dense_depth_gt, "dense_depth_gt")
                joint_depth = torch.as_tensor(dense, dtype=p.dtype, device=p.device)
            semantic_out = self.joint(prelim, joint_depth)

        return ModelOutput(
            semantic=semantic_out if "semantic" in spec.outputs else None,
            depth=depth_pred if "depth" in spec.outputs else None,
            prelim=prelim,
        )


def get_variant_spec(name: str) -> VariantSpec:
    try:
        return VARIANTS[name]
    except KeyError:
        raise UnknownVariant(f"unknown variant '{name}'; "
                             f"expected one of {VARIANT_ORDER}") from None


def build_variant(name: str | VariantSpec, cfg: ModelConfig | None = None,
                  seed: int = 0) -> VariantModel:
    """Construct a variant with seeded deterministic initialization."""
    spec = get_variant_spec(name) if isinstance(name, str) else name
    cfg = cfg or ModelConfig()
    torch.manual_seed(seed)
    return VariantModel(spec, cfg)


def forward(model: VariantModel, sample: ImageSample) -> tuple[torch.Tensor | None, torch.Tensor | None]:
    """Run one sample; returns (semantic logits or None, dense depth mm or None)."""
    out = model(sample)
    return out.semantic, out.depth


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, model: VariantModel,
                    meta: dict | None = None) -> None:
    payload = {
        "variant": model.spec.name,
        "state": model.state_dict(),
        "meta": meta or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path, model: VariantModel) -> dict:
    """Load parameters in place; returns the stored metadata."""
    path = Path(path)
    if not path.exists():
        raise MissingCheckpoint(str(path))
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("variant") != model.spec.name:
        raise MissingCheckpoint(
            f"checkpoint is for variant '{payload.get('variant')}', "
            f"model is '{model.spec.name}'")
    model.load_state_dict(payload["state"], strict=True)
    return payload.get("meta", {})


def parameter_digest(model: nn.Module) -> str:
    """Order-stable content hash of all parameters and buffers."""
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        t = tensor.detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()
