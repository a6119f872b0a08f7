"""Command-line entry point: prepare, train, eval, explain.

Exit codes: 0 success, 1 runtime failure, 2 usage or input error. Every
command re-writes the fully resolved config next to its outputs so a run
can be reproduced from its artifacts alone.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import evalx, xai
from .augment import balancing_plan, materialize_balanced
from .classes import CLASS_CODES, LesionClass
from .config import RunConfig, load_config, preset, save_config
from .dataset import (
    DatasetManifest,
    NormalizedImage,
    SplitSpec,
    compute_class_weights,
    load_manifest,
    load_split_csv,
    save_split_csv,
    standardize,
    stratified_split,
)
from .errors import DataError, TrainingDiverged
from .loader import BatchLoader
from .model import (
    REFERENCE_STAGE1_TRAINABLE_PCT,
    REFERENCE_TOTAL_PARAMS,
    build_classifier,
    load_checkpoint,
    numpy_batch_to_tensor,
    set_freeze_stage,
)
from .train import run_schedule

log = logging.getLogger("lesionlab")


def _apply_determinism(cfg: RunConfig) -> None:
    torch.manual_seed(cfg.seed)
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = preset(args.preset) if args.preset else RunConfig()
    if args.config:
        cfg = load_config(args.config, base=cfg)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if args.deterministic:
        cfg.deterministic = True
    return cfg


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    save_config(cfg, out_dir / "config_resolved.yaml")


def _print_class_table(manifest: DatasetManifest) -> None:
    counts = manifest.class_counts
    per_split = {s: manifest.split_counts(s) for s in ("train", "val", "test")}
    print(f"{'Lesion Class':<16}{'Images':>8}{'Train':>8}{'Val':>8}{'Test':>8}")
    for cls in LesionClass:
        print(
            f"{cls.code:<16}{counts[cls]:>8}"
            f"{per_split['train'][cls]:>8}{per_split['val'][cls]:>8}{per_split['test'][cls]:>8}"
        )
    print(
        f"{'Total':<16}{sum(counts.values()):>8}"
        f"{sum(per_split['train'].values()):>8}"
        f"{sum(per_split['val'].values()):>8}"
        f"{sum(per_split['test'].values()):>8}"
    )


# ---------------------------------------------------------------------------
# commands

def cmd_prepare(cfg: RunConfig, dry_run: bool = False) -> int:
    manifest = load_manifest(cfg.data.metadata_csv, cfg.data.image_dir)
    spec = SplitSpec(ratios=cfg.split.ratios, seed=cfg.seed)
    manifest = stratified_split(manifest, spec)
    _print_class_table(manifest)
    if dry_run:
        print("dry run: no files written")
        return 0
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    split_path = cfg.split_csv_path()
    save_split_csv(manifest, split_path)
    _echo_config(cfg, out_dir)
    print(f"split written to {split_path}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    _apply_determinism(cfg)
    split_path = cfg.split_csv_path()
    manifest = load_split_csv(split_path, cfg.data.image_dir)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.balance.enabled:
        plan = balancing_plan(manifest.split_counts("train"), cfg.balance.fraction)
        manifest = materialize_balanced(manifest, plan, cfg.augment.to_augment(), cfg.seed)
        save_split_csv(manifest, out_dir / "balanced_manifest.csv")
        log.info("balanced train split to %d samples", sum(plan.targets.values()))
    loss_cfg = cfg.loss.to_loss()
    weights = (
        compute_class_weights(manifest, "train").as_array()
        if loss_cfg.use_class_weights
        else None
    )
    loaders = BatchLoader(
        manifest=manifest,
        image_size=tuple(cfg.data.image_size),
        batch_size=cfg.data.batch_size,
        augment_cfg=cfg.augment.to_augment(),
        seed=cfg.seed,
        cache_images=cfg.data.cache_images,
    )
    handle = build_classifier(
        cfg.backbone.to_spec(), cfg.head.to_head(), cfg.attention.reduction, cfg.seed
    )
    total, _ = handle.parameter_counts()
    set_freeze_stage(handle, 1)
    _, stage1_trainable = handle.parameter_counts()
    print(
        f"model parameters: {total:,} total "
        f"(full-scale reference: {REFERENCE_TOTAL_PARAMS:,}); "
        f"stage 1 trainable: {100 * stage1_trainable / total:.1f}% "
        f"(full-scale reference: {REFERENCE_STAGE1_TRAINABLE_PCT}%)"
    )
    stage_cfgs = [s.to_stage() for s in cfg.stages]
    print(
        "stage schedule: "
        + ", ".join(f"stage {s.stage_id}: {s.epochs} epochs @ lr {s.base_lr:g}" for s in stage_cfgs)
    )
    _echo_config(cfg, out_dir)
    handle, report = run_schedule(
        handle,
        loaders,
        stage_cfgs,
        loss_cfg,
        mixup_cfg=cfg.mixup.to_mixup(),
        class_weights=weights,
        seed=cfg.seed,
        checkpoint_dir=out_dir / "checkpoints",
        log_path=out_dir / "train_log.jsonl",
        save_epoch_checkpoints=cfg.save_epoch_checkpoints,
    )
    with open(out_dir / "training_report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    # deterministic final metrics (no wall clock) on the validation split
    metrics = _evaluate_to_files(handle, loaders, "val", out_dir / "final_metrics")
    print(
        f"best val accuracy {report.best_val_accuracy:.4f} "
        f"(stage {report.best_stage}, epoch {report.best_epoch}); "
        f"final val accuracy {metrics['overall_accuracy']:.4f}"
    )
    print(f"checkpoints under {out_dir / 'checkpoints'}")
    return 0


def _evaluate_to_files(handle, loaders: BatchLoader, split: str, out_dir: Path) -> dict:
    images, labels = loaders.eval_split(split)
    probs = []
    with torch.no_grad():
        for start in range(0, len(labels), 256):
            x = numpy_batch_to_tensor(images[start : start + 256])
            probs.append(handle.predict_proba(x).numpy())
    scores = np.concatenate(probs)
    preds = scores.argmax(axis=1)
    cm = evalx.confusion_matrix(preds, labels)
    per_class = evalx.per_class_metrics(cm, scores, labels)
    curves, micro_auc = evalx.roc_auc_ovr(scores, labels)
    agg = evalx.aggregate(per_class, cm, micro_auc=micro_auc)
    evalx.emit_report(per_class, agg, cm, out_dir, curves)
    return evalx.metrics_to_dict(per_class, agg)


def cmd_eval(cfg: RunConfig, checkpoint: str, split: str = "test") -> int:
    _apply_determinism(cfg)
    handle = load_checkpoint(checkpoint)
    manifest = load_split_csv(cfg.split_csv_path(), cfg.data.image_dir)
    loaders = BatchLoader(
        manifest=manifest,
        image_size=tuple(cfg.data.image_size),
        batch_size=cfg.data.batch_size,
        augment_cfg=cfg.augment.to_augment(),
        seed=cfg.seed,
        cache_images=cfg.data.cache_images,
    )
    out_dir = Path(cfg.out_dir) / "eval"
    metrics = _evaluate_to_files(handle, loaders, split, out_dir)
    _echo_config(cfg, out_dir)
    print(
        f"{split} accuracy {metrics['overall_accuracy']:.4f}, "
        f"macro F1 {metrics['macro']['f1']:.4f}, "
        f"micro AUC {metrics['micro_auc']:.4f}"
    )
    print(f"report written to {out_dir}")
    return 0


def cmd_explain(
    cfg: RunConfig,
    checkpoint: str,
    image_ids: list[str],
    class_code: str | None = None,
    kind: str = "gradcam",
    opacity: float = 0.5,
) -> int:
    _apply_determinism(cfg)
    handle = load_checkpoint(checkpoint)
    manifest = load_split_csv(cfg.split_csv_path(), cfg.data.image_dir)
    by_id = {r.image_id: r for r in manifest.records}
    missing = [i for i in image_ids if i not in by_id]
    if missing:
        raise DataError(f"unknown image id(s): {missing}")
    loaders = BatchLoader(
        manifest=manifest,
        image_size=tuple(cfg.data.image_size),
        batch_size=cfg.data.batch_size,
        augment_cfg=cfg.augment.to_augment(),
        seed=cfg.seed,
        cache_images=cfg.data.cache_images,
    )
    out_dir = Path(cfg.out_dir) / "explanations"
    kinds = ("gradcam", "saliency") if kind == "both" else (kind,)
    for image_id in image_ids:
        record = by_id[image_id]
        raw = NormalizedImage(loaders.record_raw01(record), "raw01")
        std = standardize(raw)
        if class_code is None:
            probs = handle.predict_proba(numpy_batch_to_tensor(std.pixels[None]))
            target = int(probs.argmax())
            print(f"{image_id}: explaining argmax class {CLASS_CODES[target]}")
        else:
            target = LesionClass.from_code(class_code).index
        for k in kinds:
            if k == "gradcam":
                heatmap = xai.grad_cam(handle, std, target, layer=cfg.explain_layer)
            else:
                heatmap = xai.saliency_map(handle, std, target)
            png, _ = xai.save_heatmap(
                heatmap, raw, out_dir, image_id, CLASS_CODES[target], opacity
            )
            print(f"wrote {png}")
    _echo_config(cfg, out_dir)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lesionlab",
        description="Seven-class lesion classification pipeline with explainability",
    )
    parser.add_argument("--config", help="YAML run config (layered over the preset)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument("--preset", choices=["desk", "paper"], help="base configuration")
    parser.add_argument(
        "--deterministic", action="store_true",
        help="force deterministic torch kernels and single-threaded CPU math",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_prepare = sub.add_parser("prepare", help="load metadata, split, persist the split CSV")
    p_prepare.add_argument("--dry-run", action="store_true", help="validate without writing")

    sub.add_parser("train", help="run the three-stage schedule on the prepared split")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint and emit the metrics report")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", default="test", choices=["train", "val", "test"])

    p_explain = sub.add_parser("explain", help="emit Grad-CAM/saliency heatmaps")
    p_explain.add_argument("--checkpoint", required=True)
    p_explain.add_argument("--image-id", nargs="+", required=True)
    p_explain.add_argument("--class-code", choices=list(CLASS_CODES))
    p_explain.add_argument("--kind", default="gradcam", choices=["gradcam", "saliency", "both"])
    p_explain.add_argument("--opacity", type=float, default=0.5)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.command == "prepare":
            return cmd_prepare(cfg, dry_run=args.dry_run)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.split)
        if args.command == "explain":
            return cmd_explain(
                cfg, args.checkpoint, args.image_id, args.class_code, args.kind, args.opacity
            )
        parser.error(f"unknown command {args.command!r}")
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
