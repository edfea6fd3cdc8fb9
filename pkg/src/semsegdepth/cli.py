"""Command-line entry point.

Verbs: generate-data, train, evaluate, ablate, report.  Every run directory
receives a frozen copy of the fully materialized config, so any run can be
replayed exactly.  Exit codes: 0 ok, 1 config error, 2 runtime error,
3 divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import (RunConfig, config_digest, load_config, save_config)
from .data import (DatasetSplit, SparsifyConfig, make_toy_dataset, split_dataset)
from .dataset_io import (load_split_samples, read_split_file, write_toy_dataset)
from .exceptions import (ConfigError, Divergence, MissingCheckpoint,
                         SemSegDepthError)
from .harness import (LossWeights, MetricsReport, OptimConfig, TrainDataset,
                      GroundTruthStub, evaluate, render_table, run_ablation,
                      train)
from .zoo import (VARIANT_ORDER, ModelConfig, build_variant, get_variant_spec,
                  load_checkpoint, save_checkpoint)

DATA_ROOT_ENV = "SEMSEGDEPTH_DATA_ROOT"


def _default_counts(n: int) -> tuple[int, int, int]:
    val = test = n // 4
    return (n - val - test, val, test)


def cmd_generate_data(args) -> int:
    n = args.n
    counts = tuple(args.counts) if args.counts else _default_counts(n)
    sparsify = SparsifyConfig(max_range_mm=args.max_range_mm,
                              n_points=args.n_points, seed=args.seed)
    samples = make_toy_dataset(n, args.seed, args.nc, args.height, args.width,
                               sparsify=sparsify)
    ids = [s.sample_id for s in samples]
    split = split_dataset(ids, counts, args.seed) if n else DatasetSplit()
    write_toy_dataset(args.out, samples, split, args.nc, meta={
        "seed": args.seed, "height": args.height, "width": args.width,
        "n_points": args.n_points, "max_range_mm": args.max_range_mm,
    })
    print(f"wrote {n} samples to {args.out} "
          f"(train/val/test = {counts[0]}/{counts[1]}/{counts[2]})")
    return 0


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, out_dir=args.out)
    if getattr(args, "variant", None):
        cfg = replace(cfg, variant=replace(cfg.variant, name=args.variant))
    return cfg


def _materialize(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / "config.yaml")


def _build_dataset(cfg: RunConfig):
    """Returns (train, val, test) sample lists per the config's data section."""
    d = cfg.data
    if d.source == "toy":
        sparsify = SparsifyConfig(max_range_mm=d.max_range_mm,
                                  n_points=d.n_points, seed=d.sparsify_seed)
        samples = make_toy_dataset(d.n_samples, cfg.seed, d.nc, d.height,
                                   d.width, sparsify=sparsify)
        split = split_dataset([s.sample_id for s in samples], d.counts, cfg.seed)
    else:
        root = d.root or os.environ.get(DATA_ROOT_ENV, "")
        if not root:
            raise ConfigError("data.root", f"required for directory source "
                              f"(or set ${DATA_ROOT_ENV})")
        split = read_split_file(Path(root) / "split.txt")
        by_id = {}
        for ids in split.sections().values():
            for s in load_split_samples(root, ids):
                by_id[s.sample_id] = s
        samples = list(by_id.values())
    lookup = {s.sample_id: s for s in samples}
    pick = lambda ids: [lookup[i] for i in ids]
    return pick(split.train), pick(split.val), pick(split.test)


def _model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(
        nc=cfg.data.nc,
        max_range_mm=cfg.data.max_range_mm,
        head_channels=cfg.variant.head_channels,
        backbone=cfg.backbone,
        fuse=cfg.fuse,
        supervise_preliminary=cfg.variant.supervise_preliminary,
        stop_gradient_depth=cfg.variant.stop_gradient_depth,
        raw_logits_to_depth=cfg.variant.raw_logits_to_depth,
    )


def _optim(cfg: RunConfig) -> OptimConfig:
    return cfg.optim


def _weights(cfg: RunConfig) -> LossWeights:
    return cfg.loss


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    out_dir = Path(cfg.out_dir)
    _materialize(cfg, out_dir)
    train_s, val_s, _ = _build_dataset(cfg)
    model = build_variant(cfg.variant.name, _model_config(cfg), cfg.seed)
    dataset = TrainDataset(train_s, resample_sparse=cfg.data.resample_sparse,
                           sparsify=SparsifyConfig(
                               max_range_mm=cfg.data.max_range_mm,
                               n_points=cfg.data.n_points,
                               seed=cfg.data.sparsify_seed))
    result = train(model, dataset, val_s, _optim(cfg), cfg.seed,
                   weights=_weights(cfg), log_path=out_dir / "train_log.jsonl")
    model.load_state_dict(result.best_state)
    save_checkpoint(out_dir / "checkpoint.pt", model, meta={
        "config_digest": config_digest(cfg), "best_val_loss": result.best_val_loss,
        "steps": cfg.optim.steps,
    })
    print(f"trained {cfg.variant.name} for {cfg.optim.steps} steps; "
          f"checkpoint and log in {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_run_config(args)
    out_dir = Path(cfg.out_dir)
    _materialize(cfg, out_dir)
    _, _, test_s = _build_dataset(cfg)
    spec = get_variant_spec(cfg.variant.name)
    if args.gt_stub:
        model = GroundTruthStub(spec, cfg.data.nc)
    else:
        if not args.checkpoint:
            raise MissingCheckpoint("pass --checkpoint or --gt-stub")
        model = build_variant(cfg.variant.name, _model_config(cfg), cfg.seed)
        load_checkpoint(args.checkpoint, model)
    report = evaluate(model, test_s, cfg.data.nc,
                      config_digest=config_digest(cfg))
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    print(render_table([report], _weights(cfg)))
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    out_dir = Path(cfg.out_dir)
    _materialize(cfg, out_dir)
    train_s, val_s, test_s = _build_dataset(cfg)
    names = args.variants or VARIANT_ORDER

    def build(name, seed):
        return build_variant(name, _model_config(cfg), seed)

    reports, table = run_ablation(names, build, train_s, val_s, test_s,
                                  _optim(cfg), cfg.seed, cfg.data.nc,
                                  weights=_weights(cfg),
                                  config_digest=config_digest(cfg))
    payload = []
    for name, r in zip(names, reports):
        if isinstance(r, MetricsReport):
            payload.append(r.to_dict())
        else:
            payload.append({"variant": name, "error": str(r)})
    (out_dir / "reports.json").write_text(json.dumps(payload, indent=2) + "\n")
    (out_dir / "table.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_report(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports: list[MetricsReport] = []
    fig, ax = plt.subplots(figsize=(7, 4))
    for run in args.run_dirs:
        run = Path(run)
        rp = run / "report.json"
        if rp.exists():
            reports.append(MetricsReport.from_dict(json.loads(rp.read_text())))
        else:
            for row in json.loads((run / "reports.json").read_text()) if (run / "reports.json").exists() else []:
                if "error" not in row:
                    reports.append(MetricsReport.from_dict(row))
        log = run / "train_log.jsonl"
        if log.exists():
            steps, totals = [], []
            for line in log.read_text().splitlines():
                rec = json.loads(line)
                steps.append(rec["step"])
                totals.append(rec["total_loss"])
            ax.plot(steps, totals, label=run.name)
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    if ax.lines:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_dir / "loss_curves.png", dpi=120)
    plt.close(fig)

    table = render_table(reports)
    (out_dir / "comparison.txt").write_text(table + "\n")
    print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="semsegdepth",
        description="Joint semantic segmentation and depth completion toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="materialize a toy dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--nc", type=int, default=4)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--n-points", type=int, default=8000)
    g.add_argument("--max-range-mm", type=float, default=50_000.0)
    g.add_argument("--counts", type=int, nargs=3, default=None,
                   metavar=("TRAIN", "VAL", "TEST"))
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train one variant from a config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", default=None)
    t.add_argument("--variant", default=None, choices=VARIANT_ORDER)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on the test split")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--gt-stub", action="store_true",
                   help="evaluate the ground-truth echo stub instead of a checkpoint")
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--out", default=None)
    e.add_argument("--variant", default=None, choices=VARIANT_ORDER)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="train and evaluate all variants")
    a.add_argument("--config", required=True)
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--out", default=None)
    a.add_argument("--variants", nargs="*", default=None, choices=VARIANT_ORDER)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="aggregate runs into a table and plots")
    r.add_argument("run_dirs", nargs="+")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "key": exc.key,
                          "reason": exc.reason}), file=sys.stderr)
        return 1
    except Divergence as exc:
        print(json.dumps({"error": "divergence", "step": exc.step,
                          "value": exc.value}), file=sys.stderr)
        return 3
    except SemSegDepthError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
