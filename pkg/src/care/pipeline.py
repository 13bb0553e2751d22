"""Two-stage training: classification pretraining, then attention finetuning.

Stage one trains the backbone on classification alone and stops once the
training loss plateaus. Stage two starts from that checkpoint and adds
the attention objective on every annotated image, selecting the final
weights by validation mean class accuracy. Each stage writes its own
directory (checkpoint.npz, config.json, metrics.jsonl) and never touches
the other stage's files.

Determinism: parameter init uses the config seed, epoch shuffles and
per-sample augmentation draw from seed-derived generators keyed by
(epoch, sample index), and reduction orders are fixed. Two runs with the
same config and dataset produce bit-identical checkpoints; the metrics
log differs only in wall_time fields.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .annotations import AnnotationError, AnnotationRecord, BoundingBox, build_masks, scale_box
from .augment import OPS, augment_batch
from .backbone import (
    BackboneConfig,
    ConfigurationError,
    ImageBatch,
    ReferenceCNN,
    load_checkpoint,
    save_checkpoint,
)
from .cam import true_class_cams
from .data import ImageDataset
from .losses import LossBreakdown, LossConfig, classification_loss, total_loss
from .metrics import MetricsReport, PredictionSet, build_report, compute_recalls

__all__ = [
    "TrainConfig",
    "pretrain",
    "finetune_care",
    "predict",
    "evaluate_checkpoint",
    "sweep",
    "SWEEP_PARAMETERS",
    "epoch_order",
    "sample_rng",
    "stratified_split",
]

SWEEP_PARAMETERS = ("alpha", "tau", "lambda_out", "box_scale")


@dataclass
class TrainConfig:
    """Everything a training stage needs, mirrored field-for-field in JSON."""

    stage: str
    epochs: int
    batch_size: int = 64
    learning_rate: float = 1e-4
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    adam_betas: tuple[float, float] = (0.9, 0.999)
    sgd_momentum: float = 0.9
    loss: LossConfig = field(default_factory=LossConfig)
    augmentation: tuple[str, ...] = ()
    continuous_rotation: bool = False
    seed: int = 0
    early_stop_patience: int = 20
    early_stop_min_delta: float = 1e-4
    val_fraction: float = 0.1
    channel_widths: tuple[int, ...] = (16, 32, 64)

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigurationError(f"stage must be 'pretrain' or 'finetune', got {self.stage!r}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigurationError(f"optimizer must be 'adamw' or 'sgd', got {self.optimizer!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigurationError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.early_stop_patience < 0:
            raise ConfigurationError("early_stop_patience must be >= 0")
        self.augmentation = tuple(self.augmentation)
        for op in self.augmentation:
            if op not in OPS:
                raise ConfigurationError(f"unknown augmentation op {op!r}; choose from {OPS}")
        self.adam_betas = tuple(self.adam_betas)
        self.channel_widths = tuple(int(w) for w in self.channel_widths)
        if not self.channel_widths or any(w < 1 for w in self.channel_widths):
            raise ConfigurationError("channel_widths must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss"] = LossConfig(**d.get("loss", {}))
        return cls(**d)

    def save_json(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load_json(cls, path: str | Path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Shuffled sample order for one epoch, independent of prior epochs."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11, epoch]))
    return rng.permutation(n)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Augmentation generator for one sample; keyed by the sample's dataset
    index so the draw does not depend on batch composition."""
    return np.random.default_rng(np.random.SeedSequence([seed, 7, epoch, index]))


def stratified_split(labels: np.ndarray, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Split indices into (train, held_out) keeping class proportions.

    Every class with at least two samples contributes at least one to each
    side when fraction > 0; single-sample classes stay in train.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 13]))
    train_idx, held_idx = [], []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(len(members))]
        if fraction <= 0 or len(members) < 2:
            n_held = 0
        else:
            n_held = min(max(1, int(round(fraction * len(members)))), len(members) - 1)
        held_idx.extend(members[:n_held])
        train_idx.extend(members[n_held:])
    return np.sort(np.asarray(train_idx, dtype=np.int64)), np.sort(np.asarray(held_idx, dtype=np.int64))


def _boxes_by_position(dataset: ImageDataset, annotations: list[AnnotationRecord]) -> dict[int, list[BoundingBox]]:
    known = {image_id: i for i, image_id in enumerate(dataset.image_ids)}
    missing = [r.image_id for r in annotations if r.image_id not in known]
    if missing:
        shown = ", ".join(missing[:10])
        raise AnnotationError(f"{len(missing)} annotated image ids not found in the dataset: {shown}")
    shape = dataset.image_shape
    positions: dict[int, list[BoundingBox]] = {}
    for record in annotations:
        for box in record.boxes:
            box.validate(shape)
        positions[known[record.image_id]] = list(record.boxes)
    return positions


def _make_optimizer(model: ReferenceCNN, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "sgd":
        return torch.optim.SGD(
            model.parameters(),
            lr=config.learning_rate,
            momentum=config.sgd_momentum,
            weight_decay=config.weight_decay,
        )
    return torch.optim.AdamW(
        model.parameters(),
        lr=config.learning_rate,
        betas=config.adam_betas,
        weight_decay=config.weight_decay,
    )


class _JsonlLogger:
    def __init__(self, path: Path):
        self._fh = open(path, "w")

    def write(self, entry: dict) -> None:
        self._fh.write(json.dumps(entry, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _train_step(
    model: ReferenceCNN,
    pixels: np.ndarray,
    labels: np.ndarray,
    boxes_list: list,
    config: TrainConfig,
) -> LossBreakdown:
    """Forward/loss for one batch; attention on the annotated sub-batch.

    The sub-batch gets its own forward so the second-order attention
    gradient is built only over the images that need it.
    """
    batch = ImageBatch(torch.from_numpy(pixels), torch.from_numpy(labels))
    output = model(batch)
    annotated = [i for i, boxes in enumerate(boxes_list) if boxes]
    if not annotated or config.loss.alpha == 0.0:
        # alpha = 0 short-circuits to the exact classification objective
        ce = classification_loss(output.logits, batch.labels, config.loss)
        zero = torch.zeros((), dtype=ce.dtype)
        return LossBreakdown(total=ce, cross_entropy=ce, attention=zero, inner=zero, outer=zero, n_attended=0)
    shape = pixels.shape[2], pixels.shape[3]
    sub = ImageBatch(batch.pixels[annotated], batch.labels[annotated])
    sub_output = model(sub)
    cams = true_class_cams(
        sub_output,
        sub.labels,
        shape,
        detach_channel_weights=config.loss.detach_channel_weights,
        create_graph=not config.loss.detach_channel_weights,
    )
    masks = {k: build_masks(boxes_list[i], shape) for k, i in enumerate(annotated)}
    return total_loss(output.logits, batch.labels, cams, masks, config.loss)


def _run_stage(
    model: ReferenceCNN,
    config: TrainConfig,
    dataset: ImageDataset,
    boxes_by_position: dict[int, list[BoundingBox]],
    out_dir: Path,
) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    config.save_json(out_dir / "config.json")
    log = _JsonlLogger(out_dir / "metrics.jsonl")
    torch.manual_seed(config.seed)

    if config.stage == "finetune" and config.val_fraction > 0:
        train_idx, val_idx = stratified_split(dataset.labels, config.val_fraction, config.seed)
    else:
        train_idx, val_idx = np.arange(len(dataset), dtype=np.int64), np.asarray([], dtype=np.int64)
    optimizer = _make_optimizer(model, config)

    best_state = None
    best_mca = -np.inf
    best_epoch = -1
    best_ce = np.inf
    stale_epochs = 0
    global_step = 0
    stopped_early = False
    for epoch in range(config.epochs):
        model.train()
        order = train_idx[epoch_order(config.seed, epoch, len(train_idx))]
        ce_sum = 0.0
        total_sum = 0.0
        for start in range(0, len(order), config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            pixels = dataset.pixels_float(batch_idx)
            labels = dataset.labels[batch_idx]
            boxes_list = [boxes_by_position.get(int(i)) for i in batch_idx]
            if config.augmentation:
                rngs = [sample_rng(config.seed, epoch, int(i)) for i in batch_idx]
                pixels, boxes_list = augment_batch(
                    pixels, boxes_list, config.augmentation, rngs, config.continuous_rotation
                )
            breakdown = _train_step(model, pixels, labels, boxes_list, config)
            optimizer.zero_grad()
            breakdown.total.backward()
            optimizer.step()
            scalars = breakdown.scalars()
            log.write({"event": "step", "epoch": epoch, "step": global_step, **scalars})
            ce_sum += scalars["cross_entropy"] * len(batch_idx)
            total_sum += scalars["total"] * len(batch_idx)
            global_step += 1
        epoch_ce = ce_sum / len(order)
        entry = {
            "event": "epoch",
            "epoch": epoch,
            "mean_cross_entropy": epoch_ce,
            "mean_total": total_sum / len(order),
            "wall_time": round(time.time(), 3),
        }
        if len(val_idx):
            val_preds = predict(model, dataset.subset(val_idx))
            _, val_mca = compute_recalls(val_preds)
            entry["val_mca"] = val_mca
            # ties keep the latest epoch: once val saturates, later epochs
            # are the settled weights, not the first epoch that lucked out
            if val_mca >= best_mca:
                best_mca = val_mca
                best_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())
        log.write(entry)
        if config.stage == "pretrain" and config.early_stop_patience:
            if epoch_ce < best_ce - config.early_stop_min_delta:
                best_ce = epoch_ce
                stale_epochs = 0
            else:
                stale_epochs += 1
                if stale_epochs >= config.early_stop_patience:
                    log.write({"event": "early_stop", "epoch": epoch})
                    stopped_early = True
                    break
    if best_state is not None:
        model.load_state_dict(best_state)
        log.write({"event": "best", "epoch": best_epoch, "val_mca": best_mca})
    if stopped_early is False and config.stage == "pretrain" and config.epochs:
        log.write({"event": "finished", "epoch": config.epochs - 1})
    checkpoint = out_dir / "checkpoint.npz"
    save_checkpoint(checkpoint, model)
    log.close()
    return checkpoint


def _check_trainable(dataset: ImageDataset) -> None:
    if len(dataset) == 0:
        raise ConfigurationError("dataset is empty")
    if np.unique(dataset.labels).size < 2:
        raise ConfigurationError("dataset has a single class; nothing to classify")
    h, w = dataset.image_shape
    if h != w:
        raise ConfigurationError(f"backbone expects square images, got {h}x{w}")


def pretrain(config: TrainConfig, dataset: ImageDataset, out_dir: str | Path) -> Path:
    """Stage one: classification-only training from random init."""
    if config.stage != "pretrain":
        raise ConfigurationError(f"pretrain called with stage {config.stage!r}")
    _check_trainable(dataset)
    model = ReferenceCNN(
        BackboneConfig(
            input_size=dataset.image_shape[0],
            in_channels=dataset.images.shape[1],
            num_classes=dataset.num_classes,
            channel_widths=config.channel_widths,
            class_names=list(dataset.class_names),
        ),
        seed=config.seed,
    )
    return _run_stage(model, config, dataset, {}, Path(out_dir))


def finetune_care(
    config: TrainConfig,
    dataset: ImageDataset,
    annotations: list[AnnotationRecord],
    init_checkpoint: str | Path,
    out_dir: str | Path,
) -> Path:
    """Stage two: resume from a checkpoint and add attention supervision.

    Every annotation must name an image in the dataset. The initial
    checkpoint is only read; the new stage writes its own directory.
    """
    if config.stage != "finetune":
        raise ConfigurationError(f"finetune_care called with stage {config.stage!r}")
    _check_trainable(dataset)
    if not annotations:
        raise ConfigurationError("finetune needs at least one annotated image")
    model = load_checkpoint(init_checkpoint)
    if model.config.num_classes != dataset.num_classes:
        raise ConfigurationError(
            f"checkpoint has {model.config.num_classes} classes, dataset has {dataset.num_classes}"
        )
    if model.config.input_size != dataset.image_shape[0]:
        raise ConfigurationError(
            f"checkpoint expects {model.config.input_size}px images, dataset is {dataset.image_shape[0]}px"
        )
    boxes_by_position = _boxes_by_position(dataset, annotations)
    return _run_stage(model, config, dataset, boxes_by_position, Path(out_dir))


def predict(model: ReferenceCNN, dataset: ImageDataset, batch_size: int = 256) -> PredictionSet:
    """Softmax scores for every image, in dataset order."""
    model.eval()
    scores = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = np.arange(start, min(start + batch_size, len(dataset)))
            batch = ImageBatch(torch.from_numpy(dataset.pixels_float(idx)), torch.from_numpy(dataset.labels[idx]))
            output = model(batch)
            scores.append(torch.softmax(output.logits, dim=1).double().numpy())
    model.train()
    return PredictionSet(np.concatenate(scores), dataset.labels.copy())


def evaluate_checkpoint(
    checkpoint: str | Path,
    dataset: ImageDataset,
    minority_class: int | None = None,
) -> MetricsReport:
    """Load a checkpoint and score it on the given split."""
    model = load_checkpoint(checkpoint)
    if minority_class is None:
        minority_class = int(np.argmin(dataset.class_counts()))
    preds = predict(model, dataset)
    return build_report(preds, minority_class, class_names=list(dataset.class_names))


def _config_for_value(config: TrainConfig, parameter: str, value: float) -> TrainConfig:
    if parameter == "box_scale":
        return config
    return dataclasses.replace(config, loss=dataclasses.replace(config.loss, **{parameter: value}))


def _annotations_for_value(
    annotations: list[AnnotationRecord],
    parameter: str,
    value: float,
    shape: tuple[int, int],
) -> list[AnnotationRecord]:
    if parameter != "box_scale":
        return annotations
    return [
        AnnotationRecord(r.image_id, r.class_label, [scale_box(b, value, shape) for b in r.boxes])
        for r in annotations
    ]


def sweep(
    config: TrainConfig,
    dataset: ImageDataset,
    annotations: list[AnnotationRecord],
    init_checkpoint: str | Path,
    parameter: str,
    values,
    test_dataset: ImageDataset,
    out_dir: str | Path,
    minority_class: int | None = None,
) -> list[dict]:
    """Finetune once per parameter value; report test MCA and minority recall.

    Writes one run directory per value plus sweep.csv and sweep.png at the
    top level. Returns the rows in sweep order.
    """
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigurationError(f"unknown sweep parameter {parameter!r}; choose from {SWEEP_PARAMETERS}")
    values = [float(v) for v in values]
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if minority_class is None:
        minority_class = int(np.argmin(test_dataset.class_counts()))
    rows = []
    for value in values:
        run_config = _config_for_value(config, parameter, value)
        run_annotations = _annotations_for_value(annotations, parameter, value, dataset.image_shape)
        run_dir = out_dir / f"{parameter}_{value:g}"
        checkpoint = finetune_care(run_config, dataset, run_annotations, init_checkpoint, run_dir)
        report = evaluate_checkpoint(checkpoint, test_dataset, minority_class)
        rows.append({"value": value, "mca": report.mca, "minority_recall": report.minority_recall})
    with open(out_dir / "sweep.csv", "w") as fh:
        fh.write(f"{parameter},mca,minority_recall\n")
        for row in rows:
            fh.write(f"{row['value']:g},{row['mca']:.6f},{row['minority_recall']:.6f}\n")
    _plot_sweep(rows, parameter, out_dir / "sweep.png")
    return rows


def _plot_sweep(rows: list[dict], parameter: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [row["value"] for row in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, [row["mca"] for row in rows], marker="o", label="mean class accuracy")
    ax.plot(xs, [row["minority_recall"] for row in rows], marker="s", label="minority recall")
    ax.set_xlabel(parameter)
    ax.set_ylabel("score")
    ax.set_ylim(0.0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
