"""Training-time augmentation that keeps box annotations consistent.

Geometric ops transform image and boxes with the same rule; photometric
ops leave boxes alone. Each sample gets its own rng so results do not
depend on batch composition or order.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .annotations import BoundingBox

__all__ = ["OPS", "augment_sample", "rotate_box_90", "augment_batch"]

OPS = ("rotate", "flip", "color_jitter")


def rotate_box_90(box: BoundingBox, shape: tuple[int, int], k: int) -> BoundingBox:
    """Rotate a box by k*90 degrees counter-clockwise (numpy rot90 sense).

    One step maps pixel (x, y) in an (h, w) image to (y, w - 1 - x) in the
    rotated (w, h) image; applied k times.
    """
    h, w = shape
    for _ in range(k % 4):
        box = BoundingBox(box.y_min, w - 1 - box.x_max, box.y_max, w - 1 - box.x_min)
        h, w = w, h
    return box


def _flip_box(box: BoundingBox, shape: tuple[int, int], horizontal: bool) -> BoundingBox:
    h, w = shape
    if horizontal:
        return BoundingBox(w - 1 - box.x_max, box.y_min, w - 1 - box.x_min, box.y_max)
    return BoundingBox(box.x_min, h - 1 - box.y_max, box.x_max, h - 1 - box.y_min)


def _rotate_box_continuous(box: BoundingBox, shape: tuple[int, int], angle_deg: float) -> BoundingBox:
    """Axis-aligned hull of the four rotated corners, clamped to the image."""
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    cos, sin = np.cos(theta), np.sin(theta)
    corners = [
        (box.x_min, box.y_min),
        (box.x_max, box.y_min),
        (box.x_min, box.y_max),
        (box.x_max, box.y_max),
    ]
    xs, ys = [], []
    for x, y in corners:
        dx, dy = x - cx, y - cy
        xs.append(cx + cos * dx + sin * dy)
        ys.append(cy - sin * dx + cos * dy)
    x_min = int(np.clip(np.floor(min(xs)), 0, w - 1))
    x_max = int(np.clip(np.ceil(max(xs)), 0, w - 1))
    y_min = int(np.clip(np.floor(min(ys)), 0, h - 1))
    y_max = int(np.clip(np.ceil(max(ys)), 0, h - 1))
    return BoundingBox(x_min, y_min, max(x_max, x_min), max(y_max, y_min))


def augment_sample(
    image: np.ndarray,
    boxes: list[BoundingBox] | None,
    ops,
    rng: np.random.Generator,
    continuous_rotation: bool = False,
) -> tuple[np.ndarray, list[BoundingBox] | None]:
    """Apply the named ops to one (C, H, W) float image and its boxes.

    Order is rotate, flip, color_jitter. Unknown op names raise. The
    returned image is a new array; boxes is None when input boxes is None.
    """
    for op in ops:
        if op not in OPS:
            raise ValueError(f"unknown augmentation op {op!r}; choose from {OPS}")
    image = np.array(image, dtype=np.float32)
    if "rotate" in ops:
        shape = image.shape[1], image.shape[2]
        if continuous_rotation:
            angle = float(rng.uniform(-15.0, 15.0))
            image = ndimage.rotate(
                image, angle, axes=(1, 2), reshape=False, order=1, mode="nearest"
            )
            if boxes is not None:
                boxes = [_rotate_box_continuous(b, shape, angle) for b in boxes]
        else:
            k = int(rng.integers(0, 4))
            if k:
                image = np.ascontiguousarray(np.rot90(image, k, axes=(1, 2)))
                if boxes is not None:
                    boxes = [rotate_box_90(b, shape, k) for b in boxes]
    if "flip" in ops:
        for horizontal, axis in ((True, 2), (False, 1)):
            if rng.random() < 0.5:
                image = np.ascontiguousarray(np.flip(image, axis=axis))
                if boxes is not None:
                    shape = image.shape[1], image.shape[2]
                    boxes = [_flip_box(b, shape, horizontal) for b in boxes]
    if "color_jitter" in ops:
        contrast = float(rng.uniform(0.8, 1.2))
        brightness = float(rng.uniform(0.8, 1.2))
        mean = image.mean()
        image = np.clip(((image - mean) * contrast + mean) * brightness, 0.0, 1.0)
    return image, boxes


def augment_batch(
    images: np.ndarray,
    boxes_per_image: list,
    ops,
    rngs: list,
    continuous_rotation: bool = False,
) -> tuple[np.ndarray, list]:
    """Vector form of augment_sample with one rng per sample."""
    if len(images) != len(boxes_per_image) or len(images) != len(rngs):
        raise ValueError("images, boxes and rngs must have equal length")
    out_images = np.empty_like(images)
    out_boxes = []
    for i in range(len(images)):
        img, bxs = augment_sample(images[i], boxes_per_image[i], ops, rngs[i], continuous_rotation)
        out_images[i] = img
        out_boxes.append(bxs)
    return out_images, out_boxes
