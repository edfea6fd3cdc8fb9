"""Training and evaluation loops.

Training is single-device SGD with momentum and weight decay, deterministic
given the seed: batch order, initialization, and every forward are seeded.
Evaluation pools confusion counts and squared errors over the whole split
(Eq.-over-pixels aggregation, not a per-image mean) and never mutates
parameters.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import ImageSample, SparsifyConfig, sparsify_depth
from .exceptions import Divergence, EmptySplit
from .losses import depth_loss, joint_loss, semantic_loss
from .metrics import ConfusionCounts, confusion_counts
from .zoo import ModelOutput, VariantModel, VariantSpec, parameter_digest

DEFAULT_LR = 16e-4
DEFAULT_MOMENTUM = 0.9
DEFAULT_WEIGHT_DECAY = 5e-5


@dataclass
class OptimConfig:
    lr: float = DEFAULT_LR
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    steps: int = 500
    batch_size: int = 2

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")


@dataclass
class LossWeights:
    """Scales applied to the per-task losses before they are combined.

    (1.0, 1.0) reproduces the unweighted formulation; reports always state
    the weights actually used because the raw mm² depth term otherwise
    dwarfs the cross-entropy.
    """

    semantic: float = 1.0
    depth: float = 1.0


@dataclass
class TrainStepRecord:
    step: int
    semantic_loss: float | None
    depth_loss: float | None
    joint_loss: float | None
    total_loss: float
    lr: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class MetricsReport:
    variant: str
    miou: float | None
    rmse_mm: float | None
    n_samples: int
    config_digest: str

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


@dataclass
class TrainResult:
    records: list[TrainStepRecord]
    best_state: dict
    best_val_loss: float
    final_state: dict


def variant_losses(out: ModelOutput, sample: ImageSample, spec: VariantSpec,
                   weights: LossWeights, nc: int,
                   supervise_preliminary: bool = False,
                   depth_target: str = "sparse") -> dict[str, torch.Tensor | None]:
    """Per-task losses and the variant's training objective.

    ``separate`` optimizes ls + ld; ``joint`` additionally adds their sum as
    an extra term.  Depth supervision defaults to the sparse measurement
    mask; pass ``depth_target="dense"`` to supervise on full ground truth.
    """
    ls = ld = None
    if out.semantic is not None:
        ls = weights.semantic * semantic_loss(out.semantic, sample.semantic_gt)
        if supervise_preliminary and out.prelim is not None and out.prelim is not out.semantic:
            ls = ls + weights.semantic * semantic_loss(out.prelim, sample.semantic_gt)
    if out.depth is not None:
        target = sample.sparse_depth if depth_target == "sparse" else sample.dense_depth_gt
        target_t = torch.as_tensor(target, dtype=out.depth.dtype)
        ld = weights.depth * depth_loss(out.depth, target_t, mask=target_t > 0)

    if spec.loss_mode == "semantic_only":
        total = ls
    elif spec.loss_mode == "depth_only":
        total = ld
    elif spec.loss_mode == "separate":
        total = ls + ld
    elif spec.loss_mode == "joint":
        total = ls + ld + joint_loss(ls, ld)
    else:
        raise ValueError(f"unknown loss mode {spec.loss_mode}")
    lj = joint_loss(ls, ld) if (ls is not None and ld is not None) else None
    return {"semantic": ls, "depth": ld, "joint": lj, "total": total}


@dataclass
class TrainDataset:
    """In-memory sample list; optionally re-sparsifies depth every epoch."""

    samples: list[ImageSample]
    resample_sparse: bool = False
    sparsify: SparsifyConfig = field(default_factory=SparsifyConfig)

    def get(self, index: int, epoch: int) -> ImageSample:
        s = self.samples[index]
        if self.resample_sparse and s.dense_depth_gt is not None:
            cfg = replace(self.sparsify,
                          seed=hash((self.sparsify.seed, epoch, index)) % (2**32))
            s = replace(s, sparse_depth=sparsify_depth(s.dense_depth_gt, cfg))
        return s


def _mean_loss(values: list[torch.Tensor | None]) -> float | None:
    present = [v for v in values if v is not None]
    if not present:
        return None
    return float(sum(float(v) for v in present) / len(present))


def train(model: VariantModel, train_samples: list[ImageSample] | TrainDataset,
          val_samples: list[ImageSample] | None, optim: OptimConfig, seed: int,
          weights: LossWeights | None = None, log_path: str | Path | None = None,
          eval_every: int | None = None, depth_target: str = "sparse") -> TrainResult:
    """SGD training loop; returns the step log and the best-val parameters."""
    if isinstance(train_samples, TrainDataset):
        dataset = train_samples
    else:
        dataset = TrainDataset(list(train_samples))
    if not dataset.samples:
        raise EmptySplit("training split is empty")
    weights = weights or LossWeights()
    eval_every = eval_every or max(1, optim.steps // 5)

    torch.manual_seed(seed)
    order_rng = np.random.default_rng(seed)
    opt = torch.optim.SGD(model.parameters(), lr=optim.lr,
                          momentum=optim.momentum,
                          weight_decay=optim.weight_decay)

    def losses_for(sample):
        return variant_losses(model(sample), sample, model.spec, weights,
                              model.cfg.nc, model.cfg.supervise_preliminary,
                              depth_target)

    def batch_losses(samples):
        per = [losses_for(s) for s in samples]
        total = sum(l["total"] for l in per) / len(per)
        return per, total

    records: list[TrainStepRecord] = []
    log_file = open(log_path, "w") if log_path else None
    n = len(dataset.samples)
    order: list[tuple[int, int]] = []
    epoch = 0
    best_val = math.inf
    best_state = copy.deepcopy(model.state_dict())

    def validate() -> float:
        if not val_samples:
            return math.inf
        with torch.no_grad():
            _, total = batch_losses(val_samples)
        return float(total)

    try:
        for step in range(1, optim.steps + 1):
            while len(order) < optim.batch_size:
                order.extend((i, epoch) for i in order_rng.permutation(n))
                epoch += 1
            batch, order = order[:optim.batch_size], order[optim.batch_size:]
            opt.zero_grad()
            per, total = batch_losses([dataset.get(i, ep) for i, ep in batch])
            if not torch.isfinite(total):
                raise Divergence(step, float(total))
            total.backward()
            opt.step()

            rec = TrainStepRecord(
                step=step,
                semantic_loss=_mean_loss([l["semantic"] for l in per]),
                depth_loss=_mean_loss([l["depth"] for l in per]),
                joint_loss=_mean_loss([l["joint"] for l in per]),
                total_loss=float(total),
                lr=optim.lr,
            )
            records.append(rec)
            if log_file:
                log_file.write(rec.to_json() + "\n")

            if step % eval_every == 0 or step == optim.steps:
                val = validate()
                if val <= best_val:
                    best_val = val
                    best_state = copy.deepcopy(model.state_dict())
    finally:
        if log_file:
            log_file.close()

    if not val_samples:
        best_state = copy.deepcopy(model.state_dict())
        best_val = records[-1].total_loss if records else math.inf
    return TrainResult(records=records, best_state=best_state,
                       best_val_loss=best_val,
                       final_state=copy.deepcopy(model.state_dict()))


class GroundTruthStub:
    """Oracle model that echoes the ground truth; used to validate evaluation."""

    def __init__(self, spec: VariantSpec, nc: int):
        self.spec = spec
        self.nc = nc

    def __call__(self, sample: ImageSample) -> ModelOutput:
        sem = None
        if "semantic" in self.spec.outputs:
            gt = torch.as_tensor(sample.semantic_gt, dtype=torch.long)
            sem = torch.nn.functional.one_hot(gt, self.nc).permute(2, 0, 1).float()
        depth = None
        if "depth" in self.spec.outputs:
            depth = torch.as_tensor(sample.dense_depth_gt, dtype=torch.float32)
        return ModelOutput(semantic=sem, depth=depth)


def evaluate(model, samples: list[ImageSample], nc: int,
             config_digest: str = "", ignore_id: int | None = None) -> MetricsReport:
    """Pooled mIoU / RMSE over a split; read-only on model parameters.

    Confusion counts are pooled over all pixels of the split before the IoU
    mean; squared depth errors are pooled over all valid ground-truth pixels.
    """
    if not samples:
        raise EmptySplit("evaluation split is empty")
    spec = getattr(model, "spec")
    counts = ConfusionCounts.zeros(nc)
    sq_sum = 0.0
    n_px = 0
    with torch.no_grad():
        for s in samples:
            out = model(s)
            if out.semantic is not None and s.semantic_gt is not None:
                pred = out.semantic.argmax(dim=0).cpu().numpy()
                counts.add(confusion_counts(pred, s.semantic_gt, nc, ignore_id))
            if out.depth is not None and s.dense_depth_gt is not None:
                gt = np.asarray(s.dense_depth_gt, dtype=np.float64)
                mask = gt > 0
                pred = out.depth.detach().cpu().numpy().astype(np.float64)
                diff = pred[mask] - gt[mask]
                sq_sum += float((diff * diff).sum())
                n_px += int(mask.sum())
    return MetricsReport(
        variant=spec.name,
        miou=counts.miou() if "semantic" in spec.outputs else None,
        rmse_mm=math.sqrt(sq_sum / n_px) if (n_px and "depth" in spec.outputs) else None,
        n_samples=len(samples),
        config_digest=config_digest,
    )


# ---------------------------------------------------------------------------
# Ablation runner and table rendering
# ---------------------------------------------------------------------------

ABLATION_FOOTNOTE = (
    "Reference columns are published full-scale results; desk-scale runs "
    "are not expected to match them.")


def render_table(reports: list[MetricsReport | Exception],
                 loss_weights: LossWeights | None = None) -> str:
    from .zoo import PAPER_REFERENCE, VARIANT_ORDER

    def fmt(v, spec="{:.4f}"):
        return "-" if v is None else spec.format(v)

    header = f"{'Method':<22} {'mIoU':>8} {'RMSE(mm)':>10} {'ref mIoU':>9} {'ref RMSE':>9}"
    lines = [header, "-" * len(header)]
    by_name = {}
    for r in reports:
        if isinstance(r, MetricsReport):
            by_name[r.variant] = r
    for name in VARIANT_ORDER:
        ref_miou, ref_rmse = PAPER_REFERENCE[name]
        r = by_name.get(name)
        if r is None:
            continue
        lines.append(
            f"{name:<22} {fmt(r.miou):>8} {fmt(r.rmse_mm, '{:.1f}'):>10} "
            f"{fmt(ref_miou):>9} {fmt(ref_rmse, '{:.1f}'):>9}")
    lines.append("")
    lines.append(ABLATION_FOOTNOTE)
    if loss_weights:
        lines.append(f"Loss weights used: semantic={loss_weights.semantic}, "
                     f"depth={loss_weights.depth}")
    return "\n".join(lines)


def run_ablation(variant_names: list[str], build_model, train_samples,
                 val_samples, eval_samples, optim: OptimConfig, seed: int, nc: int,
                 weights: LossWeights | None = None,
                 config_digest: str = "") -> tuple[list[MetricsReport | Exception], str]:
    """Train and evaluate each variant under one shared budget.

    ``build_model(name, seed)`` constructs a fresh model.  A failing variant
    contributes its exception to the report list instead of aborting the run.
    Returns (per-variant reports, rendered table).
    """
    reports: list[MetricsReport | Exception] = []
    for name in variant_names:
        try:
            model = build_model(name, seed)
            res = train(model, train_samples, val_samples, optim, seed,
                        weights=weights)
            model.load_state_dict(res.best_state)
            reports.append(evaluate(model, eval_samples, nc,
                                    config_digest=config_digest))
        except Exception as exc:  # reported per-variant, not fatal
            reports.append(exc)
    return reports, render_table(reports, weights)
