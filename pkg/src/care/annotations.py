"""Bounding-box annotations and the binary masks derived from them.

Boxes use inclusive integer pixel coordinates in image space. A MaskPair
holds the complementary inside/outside masks consumed by the attention
loss: every pixel is in exactly one of the two masks.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "BoundingBox",
    "MaskPair",
    "AnnotationRecord",
    "build_masks",
    "scale_box",
    "rescale_boxes",
    "load_annotations",
    "save_annotations",
]

CSV_HEADER = ["image_id", "class_label", "x_min", "y_min", "x_max", "y_max"]


class AnnotationError(ValueError):
    """Raised for malformed annotation files or boxes outside the image."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box, inclusive pixel coordinates (never empty)."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"empty box: {self}")
        if self.x_min < 0 or self.y_min < 0:
            raise ValueError(f"negative coordinates: {self}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1

    @property
    def height(self) -> int:
        return self.y_max - self.y_min + 1

    @property
    def area(self) -> int:
        return self.width * self.height

    def validate(self, shape: tuple[int, int]) -> None:
        """Check the box fits inside an H x W image."""
        h, w = shape
        if self.x_max >= w or self.y_max >= h:
            raise ValueError(f"box {self} outside {h}x{w} image")

    def intersection_area(self, other: "BoundingBox") -> int:
        iw = min(self.x_max, other.x_max) - max(self.x_min, other.x_min) + 1
        ih = min(self.y_max, other.y_max) - max(self.y_min, other.y_min) + 1
        return max(0, iw) * max(0, ih)

    def iou(self, other: "BoundingBox") -> float:
        inter = self.intersection_area(other)
        return inter / (self.area + other.area - inter)


@dataclass
class MaskPair:
    """Binary complement masks: ``inside`` marks pixels covered by any box."""

    inside: np.ndarray
    outside: np.ndarray


@dataclass
class AnnotationRecord:
    image_id: str
    class_label: int
    boxes: list[BoundingBox] = field(default_factory=list)


def build_masks(boxes: list[BoundingBox], shape: tuple[int, int]) -> MaskPair:
    """Union of box interiors -> inside mask; complement -> outside mask.

    The union rule makes the result independent of box order and of
    duplicates. Raises on an empty box list: callers must skip the
    attention loss for images without boxes instead of feeding a zero mask.
    """
    if not boxes:
        raise ValueError("build_masks needs at least one box")
    h, w = shape
    inside = np.zeros((h, w), dtype=np.uint8)
    for box in boxes:
        box.validate(shape)
        inside[box.y_min : box.y_max + 1, box.x_min : box.x_max + 1] = 1
    return MaskPair(inside=inside, outside=1 - inside)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def scale_box(box: BoundingBox, factor: float, shape: tuple[int, int]) -> BoundingBox:
    """Grow or shrink a box about its center, for annotation-robustness runs.

    Half-extents are multiplied by ``factor``, rounded half-up and clamped
    to the image. A box that degenerates after clamping collapses to the
    one-pixel box at its center, never to an empty one. ``factor=1.0`` is
    the exact identity (the center +/- half-extent arithmetic is integral).
    """
    if factor <= 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    h, w = shape
    cx = (box.x_min + box.x_max) / 2.0
    cy = (box.y_min + box.y_max) / 2.0
    hx = (box.x_max - box.x_min) / 2.0 * factor
    hy = (box.y_max - box.y_min) / 2.0 * factor
    x_min = max(0, _round_half_up(cx - hx))
    y_min = max(0, _round_half_up(cy - hy))
    x_max = min(w - 1, _round_half_up(cx + hx))
    y_max = min(h - 1, _round_half_up(cy + hy))
    if x_min > x_max or y_min > y_max:
        px = min(w - 1, max(0, _round_half_up(cx)))
        py = min(h - 1, max(0, _round_half_up(cy)))
        return BoundingBox(px, py, px, py)
    return BoundingBox(x_min, y_min, x_max, y_max)


def _rescale_coord_low(c: int, scale: float) -> int:
    return int(math.floor(c * scale))


def _rescale_coord_high(c: int, scale: float) -> int:
    return int(math.ceil((c + 1) * scale)) - 1


def rescale_boxes(
    record: AnnotationRecord,
    from_shape: tuple[int, int],
    to_shape: tuple[int, int],
) -> AnnotationRecord:
    """Map boxes between image resolutions, tracking an image resize.

    Low edges map the left/top edge of the pixel span, high edges the
    right/bottom edge, so the scaled box covers exactly the pixels the
    original span covers after resizing; the result is clamped and never
    empty for any positive scale.
    """
    fh, fw = from_shape
    th, tw = to_shape
    sy, sx = th / fh, tw / fw
    boxes = []
    for b in record.boxes:
        boxes.append(
            BoundingBox(
                x_min=max(0, _rescale_coord_low(b.x_min, sx)),
                y_min=max(0, _rescale_coord_low(b.y_min, sy)),
                x_max=min(tw - 1, _rescale_coord_high(b.x_max, sx)),
                y_max=min(th - 1, _rescale_coord_high(b.y_max, sy)),
            )
        )
    return replace(record, boxes=boxes)


def load_annotations(
    path: str | Path,
    image_shape: tuple[int, int] | None = None,
) -> list[AnnotationRecord]:
    """Read box annotations from CSV, one row per box.

    Rows with the same image_id are merged into one record (first-seen
    order preserved). When ``image_shape`` is given every box is validated
    against it; errors name the offending image_id. Malformed rows raise
    with the 1-based line number. An empty file yields an empty list.
    """
    records: dict[str, AnnotationRecord] = {}
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or (lineno == 1 and row == CSV_HEADER):
                continue
            if len(row) != 6:
                raise AnnotationError(f"{path}:{lineno}: expected 6 columns, got {len(row)}")
            try:
                image_id = row[0]
                class_label = int(row[1])
                coords = [int(v) for v in row[2:]]
                box = BoundingBox(coords[0], coords[1], coords[2], coords[3])
            except ValueError as exc:
                raise AnnotationError(f"{path}:{lineno}: {exc}") from exc
            if image_shape is not None:
                try:
                    box.validate(image_shape)
                except ValueError as exc:
                    raise AnnotationError(f"image {image_id!r}: {exc}") from exc
            rec = records.get(image_id)
            if rec is None:
                records[image_id] = AnnotationRecord(image_id, class_label, [box])
            else:
                if rec.class_label != class_label:
                    raise AnnotationError(
                        f"{path}:{lineno}: image {image_id!r} has conflicting class labels "
                        f"{rec.class_label} and {class_label}"
                    )
                rec.boxes.append(box)
    return list(records.values())


def save_annotations(path: str | Path, records: list[AnnotationRecord]) -> None:
    """Write records as CSV (header + one row per box)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for rec in records:
            for b in rec.boxes:
                writer.writerow([rec.image_id, rec.class_label, b.x_min, b.y_min, b.x_max, b.y_max])
