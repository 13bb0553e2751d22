"""Command-line interface.

Subcommands cover the full workflow: synth-data makes the imbalanced
benchmark, pretrain and finetune run the two training stages, gen-bbox
turns probability maps into box annotations, sweep varies one loss
parameter, eval scores a checkpoint and viz renders attention overlays.

Exit codes: 0 on success, 2 on validation problems (bad flags, malformed
files, shape mismatches).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .annotations import AnnotationRecord, BoundingBox, load_annotations, save_annotations
from .backbone import ImageBatch, load_checkpoint
from .bbox_autogen import boxes_from_probability_map, load_probability_map
from .cam import cam_for_true_class
from .data import SyntheticSpec, load_dataset, write_synthetic_tree
from .losses import LossConfig, inverse_frequency_weights
from .metrics import render_report
from .pipeline import (
    SWEEP_PARAMETERS,
    TrainConfig,
    evaluate_checkpoint,
    finetune_care,
    predict,
    pretrain,
    sweep,
)

__all__ = ["main", "build_parser"]


def _add_train_flags(parser: argparse.ArgumentParser, stage: str) -> None:
    parser.add_argument("--config", type=Path, help="TrainConfig JSON; flags below override its fields")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--lr", type=float, dest="learning_rate")
    parser.add_argument("--optimizer", choices=["adamw", "sgd"])
    parser.add_argument("--seed", type=int)
    parser.add_argument("--widths", type=str, help="comma-separated conv channel widths, e.g. 16,32,64")
    parser.add_argument("--augment", type=str, help="comma-separated ops: rotate,flip,color_jitter")
    parser.add_argument("--csl", action="store_true", help="inverse-frequency class weights from train counts")
    parser.add_argument("--focal-gamma", type=float)
    if stage == "pretrain":
        parser.add_argument("--patience", type=int, help="early-stop patience on training cross entropy")
    else:
        parser.add_argument("--alpha", type=float)
        parser.add_argument("--tau", type=float)
        parser.add_argument("--lambda-out", type=float, dest="lambda_out")
        parser.add_argument("--detach-channel-weights", action="store_true")
        parser.add_argument("--val-fraction", type=float)


_STAGE_DEFAULT_EPOCHS = {"pretrain": 200, "finetune": 30}


def _train_config(args: argparse.Namespace, stage: str, class_counts=None) -> TrainConfig:
    if args.config is not None:
        config = TrainConfig.load_json(args.config)
        if config.stage != stage:
            raise ValueError(f"config stage is {config.stage!r}, expected {stage!r}")
    else:
        config = TrainConfig(stage=stage, epochs=_STAGE_DEFAULT_EPOCHS[stage])
    updates: dict = {}
    for name in ("epochs", "batch_size", "learning_rate", "optimizer", "seed"):
        if getattr(args, name, None) is not None:
            updates[name] = getattr(args, name)
    if getattr(args, "patience", None) is not None:
        updates["early_stop_patience"] = args.patience
    if getattr(args, "val_fraction", None) is not None:
        updates["val_fraction"] = args.val_fraction
    if args.widths is not None:
        updates["channel_widths"] = tuple(int(w) for w in args.widths.split(","))
    if args.augment is not None:
        updates["augmentation"] = tuple(op for op in args.augment.split(",") if op)
    loss_updates: dict = {}
    for name in ("alpha", "tau", "lambda_out", "focal_gamma"):
        if getattr(args, name, None) is not None:
            loss_updates[name] = getattr(args, name)
    if getattr(args, "detach_channel_weights", False):
        loss_updates["detach_channel_weights"] = True
    if args.csl:
        if class_counts is None:
            raise ValueError("--csl needs a training dataset to count classes")
        loss_updates["class_weights"] = [float(w) for w in inverse_frequency_weights(class_counts)]
    if loss_updates:
        updates["loss"] = dataclasses.replace(config.loss, **loss_updates)
    return dataclasses.replace(config, **updates) if updates else config


def _cmd_synth_data(args: argparse.Namespace) -> int:
    if args.spec is not None:
        raw = json.loads(Path(args.spec).read_text())
        if "classes" in raw:
            raw["classes"] = tuple(tuple(c) for c in raw["classes"])
        for key in ("minority_classes", "patch_size_range", "patch_contrast_range"):
            if key in raw:
                raw[key] = tuple(raw[key])
        spec = SyntheticSpec(**raw)
        if args.seed is not None:
            spec = dataclasses.replace(spec, seed=args.seed)
    else:
        spec = SyntheticSpec(seed=args.seed if args.seed is not None else 0, image_size=args.image_size)
    write_synthetic_tree(spec, args.out)
    print(f"wrote synthetic dataset to {args.out}")
    return 0


def _cmd_pretrain(args: argparse.Namespace) -> int:
    dataset, _ = load_dataset(args.data, "train")
    config = _train_config(args, "pretrain", dataset.class_counts())
    checkpoint = pretrain(config, dataset, args.out)
    print(f"pretrain checkpoint: {checkpoint}")
    return 0


def _finetune_inputs(args: argparse.Namespace):
    dataset, annotations = load_dataset(args.data, "train")
    if args.annotations is not None:
        annotations = load_annotations(args.annotations, dataset.image_shape)
    if not annotations:
        raise ValueError("no box annotations found; pass --annotations or add train/boxes.csv")
    return dataset, annotations


def _cmd_finetune(args: argparse.Namespace) -> int:
    dataset, annotations = _finetune_inputs(args)
    config = _train_config(args, "finetune", dataset.class_counts())
    checkpoint = finetune_care(config, dataset, annotations, args.init, args.out)
    print(f"finetune checkpoint: {checkpoint}")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    dataset, annotations = _finetune_inputs(args)
    test_dataset, _ = load_dataset(args.data, args.eval_split)
    config = _train_config(args, "finetune", dataset.class_counts())
    values = [float(v) for v in args.values.split(",")]
    rows = sweep(
        config,
        dataset,
        annotations,
        args.init,
        args.param,
        values,
        test_dataset,
        args.out,
        minority_class=args.minority_class,
    )
    for row in rows:
        print(f"{args.param}={row['value']:g} mca={row['mca']:.4f} minority_recall={row['minority_recall']:.4f}")
    return 0


def _cmd_gen_bbox(args: argparse.Namespace) -> int:
    maps_dir = Path(args.maps)
    if not maps_dir.is_dir():
        raise NotADirectoryError(f"no such directory: {maps_dir}")
    paths = sorted(p for p in maps_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
    if not paths:
        raise ValueError(f"no probability-map images under {maps_dir}")
    records = []
    for path in paths:
        pmap = load_probability_map(path)
        boxes = boxes_from_probability_map(
            pmap,
            threshold=args.threshold,
            min_area_fraction=args.min_area,
            keep=args.keep,
            connectivity=args.connectivity,
        )
        if not boxes:
            h, w = pmap.values.shape
            boxes = [BoundingBox(0, 0, w - 1, h - 1)]
            print(
                f"warning: {path.stem}: no component above the area threshold; "
                "falling back to a whole-image box",
                file=sys.stderr,
            )
        records.append(AnnotationRecord(path.stem, args.class_label, boxes))
    save_annotations(args.out, records)
    print(f"wrote {sum(len(r.boxes) for r in records)} boxes for {len(records)} images to {args.out}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    dataset, _ = load_dataset(args.data, args.split)
    report = evaluate_checkpoint(args.checkpoint, dataset, args.minority_class)
    render_report(report, args.report)
    print(
        f"mca={report.mca:.4f} mean_auc={report.mean_auc:.4f} "
        f"minority_recall={report.minority_recall:.4f} (report in {args.report})"
    )
    return 0


def _spread_indices(labels: np.ndarray, limit: int) -> list[int]:
    """Round-robin over classes so small limits still show each class."""
    by_class = [list(np.flatnonzero(labels == c)) for c in np.unique(labels)]
    picked: list[int] = []
    while len(picked) < limit and any(by_class):
        for members in by_class:
            if members and len(picked) < limit:
                picked.append(int(members.pop(0)))
    return picked


def _cmd_viz(args: argparse.Namespace) -> int:
    from .cam import render_overlay

    dataset, annotations = load_dataset(args.data, args.split)
    if args.boxes is not None:
        annotations = load_annotations(args.boxes, dataset.image_shape)
    boxes_by_id = {r.image_id: r.boxes for r in annotations}
    model = load_checkpoint(args.checkpoint)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    indices = _spread_indices(dataset.labels, args.limit)
    preds = predict(model, dataset.subset(indices))
    pixels = torch.from_numpy(dataset.pixels_float(indices))
    output = model(ImageBatch(pixels, torch.from_numpy(dataset.labels[indices])))
    maps = cam_for_true_class(output, torch.from_numpy(preds.predicted), dataset.image_shape)
    for pos, idx in enumerate(indices):
        image_id = dataset.image_ids[idx]
        render_overlay(
            dataset.pixels_float([idx])[0],
            maps[pos],
            out_dir / f"{image_id}_overlay.png",
            boxes=boxes_by_id.get(image_id),
        )
    print(f"wrote {len(indices)} overlays to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="care", description="attention-supervised imbalanced classification")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic imbalanced dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--spec", type=Path, help="JSON file overriding the dataset parameters")
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("pretrain", help="stage one: classification-only training")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_train_flags(p, "pretrain")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", help="stage two: attention finetuning from a checkpoint")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--init", type=Path, required=True, help="pretrain checkpoint to start from")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--annotations", type=Path, help="boxes CSV (default: <data>/train/boxes.csv)")
    _add_train_flags(p, "finetune")
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("gen-bbox", help="boxes from probability-map images")
    p.add_argument("--maps", type=Path, required=True, help="directory of grayscale probability maps")
    p.add_argument("--out", type=Path, required=True, help="output boxes CSV")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--min-area", type=float, default=0.01)
    p.add_argument("--keep", choices=["largest", "all"], default="largest")
    p.add_argument("--connectivity", type=int, choices=[4, 8], default=8)
    p.add_argument("--class-label", type=int, default=0)
    p.set_defaults(func=_cmd_gen_bbox)

    p = sub.add_parser("sweep", help="finetune across one parameter's values")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--init", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--annotations", type=Path)
    p.add_argument("--param", choices=list(SWEEP_PARAMETERS), required=True)
    p.add_argument("--values", type=str, required=True, help="comma-separated values")
    p.add_argument("--eval-split", type=str, default="test")
    p.add_argument("--minority-class", type=int)
    _add_train_flags(p, "finetune")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", type=str, default="test")
    p.add_argument("--report", type=Path, required=True, help="output report directory")
    p.add_argument("--minority-class", type=int)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("viz", help="attention overlays for a few images")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", type=str, default="test")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--limit", type=int, default=8)
    p.add_argument("--boxes", type=Path, help="draw these boxes on the overlays")
    p.set_defaults(func=_cmd_viz)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, NotADirectoryError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
