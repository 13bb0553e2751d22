"""Dataset container, on-disk layout and the synthetic imbalanced generator.

On disk a dataset is ``root/<split>/<class_name>/<image files>`` with an
optional ``root/<split>/boxes.csv`` holding box annotations (class names
are read in sorted order, so directory names fix the label indices).

The synthetic generator builds a desk-scale imbalanced problem: two
majority classes told apart by global texture (smooth blobs vs oriented
stripes), and a small minority class that looks exactly like the blob
class except for one localized checker-textured patch. The patch extent
is the ground-truth box, so attention supervision has a real signal to
find and the box-generation pipeline has something to detect.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .annotations import AnnotationRecord, BoundingBox, load_annotations, save_annotations

__all__ = [
    "ImageDataset",
    "SyntheticSpec",
    "generate_synthetic",
    "save_dataset",
    "load_dataset",
    "write_synthetic_tree",
]


@dataclass
class ImageDataset:
    """In-memory image classification dataset.

    Images are (N, C, H, W) uint8; convert to float in [0, 1] per batch.
    """

    images: np.ndarray
    labels: np.ndarray
    image_ids: list[str]
    class_names: list[str]

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise ValueError("images must be (N, C, H, W) uint8")
        if len(self.images) != len(self.labels) or len(self.images) != len(self.image_ids):
            raise ValueError("images/labels/image_ids length mismatch")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices) -> "ImageDataset":
        indices = np.asarray(indices)
        return ImageDataset(
            images=self.images[indices],
            labels=self.labels[indices],
            image_ids=[self.image_ids[i] for i in indices],
            class_names=self.class_names,
        )

    def pixels_float(self, indices) -> np.ndarray:
        return self.images[np.asarray(indices)].astype(np.float32) / 255.0


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic imbalanced dataset.

    ``classes`` lists (name, train_count, test_count); names must sort in
    the given order since the on-disk loader sorts directories. Minority
    classes carry one checker patch per image with its box recorded.
    """

    classes: tuple = (("blobs", 2000, 400), ("lines", 1500, 300), ("spots", 60, 100))
    image_size: int = 64
    minority_classes: tuple = ("spots",)
    patch_size_range: tuple[int, int] = (14, 22)
    # kept subtle: a louder patch makes plain CE solve the minority class
    # unaided, erasing the effect the attention loss exists to provide
    patch_contrast_range: tuple[float, float] = (0.25, 0.40)
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        names = [c[0] for c in self.classes]
        if names != sorted(names):
            raise ValueError(f"class names must be in sorted order, got {names}")
        for name in self.minority_classes:
            if name not in names:
                raise ValueError(f"minority class {name!r} not in classes")
        if self.patch_size_range[1] + 4 > self.image_size:
            raise ValueError("patch does not fit inside the image with margin")

    @property
    def class_names(self) -> list[str]:
        return [c[0] for c in self.classes]


def _smooth_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Low-frequency blotchy field around a random base brightness."""
    base = rng.uniform(0.35, 0.65)
    noise = ndimage.gaussian_filter(rng.normal(0.0, 1.0, (size, size)), sigma=size / 10.0)
    peak = np.abs(noise).max()
    if peak > 0:
        noise = noise / peak
    return base + noise * rng.uniform(0.10, 0.20)

def _stripe_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Oriented sinusoidal stripes of random frequency, phase and angle."""
    base = rng.uniform(0.35, 0.65)
    theta = rng.uniform(0.0, np.pi)
    freq = rng.uniform(8.0, 14.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    pattern = np.sin(2.0 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) / size + phase)
    return base + 0.15 * pattern


def _checker_patch(rng: np.random.Generator, field: np.ndarray, spec: SyntheticSpec) -> BoundingBox:
    """Stamp one checker patch into the field; returns its extent."""
    size = field.shape[0]
    lo, hi = spec.patch_size_range
    s = int(rng.integers(lo, hi + 1))
    margin = 2
    x0 = int(rng.integers(margin, size - s - margin + 1))
    y0 = int(rng.integers(margin, size - s - margin + 1))
    yy, xx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    checker = ((xx // 2 + yy // 2) % 2) * 2.0 - 1.0
    amp = rng.uniform(*spec.patch_contrast_range)
    field[y0 : y0 + s, x0 : x0 + s] += amp * checker
    return BoundingBox(x0, y0, x0 + s - 1, y0 + s - 1)


def _render_image(rng: np.random.Generator, field: np.ndarray, spec: SyntheticSpec) -> np.ndarray:
    """Gray field -> noisy 3-channel uint8 image."""
    field = field + rng.normal(0.0, spec.noise_sigma, field.shape)
    gains = rng.uniform(0.95, 1.05, size=3)
    channels = np.clip(field[None, :, :] * gains[:, None, None], 0.0, 1.0)
    return np.round(channels * 255.0).astype(np.uint8)


def generate_synthetic(
    spec: SyntheticSpec,
) -> tuple[ImageDataset, ImageDataset, list[AnnotationRecord], list[AnnotationRecord]]:
    """Build (train, test, train_annotations, test_annotations).

    Every image gets its own generator seeded by (seed, split, class,
    index), so regeneration is byte-identical and independent of counts
    elsewhere in the spec.
    """
    datasets = []
    annotations_by_split: list[list[AnnotationRecord]] = []
    for split_idx, split in enumerate(("train", "test")):
        images, labels, ids = [], [], []
        annotations: list[AnnotationRecord] = []
        for class_idx, (name, train_count, test_count) in enumerate(spec.classes):
            count = train_count if split == "train" else test_count
            for i in range(count):
                rng = np.random.default_rng(
                    np.random.SeedSequence([spec.seed, split_idx, class_idx, i])
                )
                if name in spec.minority_classes:
                    field = _smooth_texture(rng, spec.image_size)
                    box = _checker_patch(rng, field, spec)
                elif name == "lines":
                    field = _stripe_texture(rng, spec.image_size)
                    box = None
                else:
                    field = _smooth_texture(rng, spec.image_size)
                    box = None
                image_id = f"{name}_{split}_{i:05d}"
                images.append(_render_image(rng, field, spec))
                labels.append(class_idx)
                ids.append(image_id)
                if box is not None:
                    annotations.append(AnnotationRecord(image_id, class_idx, [box]))
        datasets.append(
            ImageDataset(
                images=np.stack(images),
                labels=np.asarray(labels, dtype=np.int64),
                image_ids=ids,
                class_names=spec.class_names,
            )
        )
        annotations_by_split.append(annotations)
    return datasets[0], datasets[1], annotations_by_split[0], annotations_by_split[1]


def save_dataset(
    root: str | Path,
    split: str,
    dataset: ImageDataset,
    annotations: list[AnnotationRecord] | None = None,
) -> None:
    root = Path(root)
    for name in dataset.class_names:
        (root / split / name).mkdir(parents=True, exist_ok=True)
    for i in range(len(dataset)):
        name = dataset.class_names[dataset.labels[i]]
        arr = np.transpose(dataset.images[i], (1, 2, 0))
        img = Image.fromarray(arr.squeeze() if arr.shape[-1] == 1 else arr)
        img.save(root / split / name / f"{dataset.image_ids[i]}.png")
    if annotations:
        save_annotations(root / split / "boxes.csv", annotations)


def load_dataset(root: str | Path, split: str) -> tuple[ImageDataset, list[AnnotationRecord]]:
    """Read a split from disk; returns the dataset and its annotations
    (empty list when no boxes.csv is present)."""
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise FileNotFoundError(f"no such split directory: {split_dir}")
    class_names = sorted(p.name for p in split_dir.iterdir() if p.is_dir())
    if not class_names:
        raise ValueError(f"no class directories under {split_dir}")
    images, labels, ids = [], [], []
    for class_idx, name in enumerate(class_names):
        for path in sorted((split_dir / name).iterdir()):
            if path.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp"):
                continue
            arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)
            images.append(np.transpose(arr, (2, 0, 1)))
            labels.append(class_idx)
            ids.append(path.stem)
    if not images:
        raise ValueError(f"no images under {split_dir}")
    dataset = ImageDataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        image_ids=ids,
        class_names=class_names,
    )
    boxes_csv = split_dir / "boxes.csv"
    annotations = load_annotations(boxes_csv, dataset.image_shape) if boxes_csv.exists() else []
    return dataset, annotations


def write_synthetic_tree(spec: SyntheticSpec, root: str | Path) -> None:
    """Generate and lay out the synthetic dataset under ``root``."""
    train, test, train_ann, test_ann = generate_synthetic(spec)
    save_dataset(root, "train", train, train_ann)
    save_dataset(root, "test", test, test_ann)
