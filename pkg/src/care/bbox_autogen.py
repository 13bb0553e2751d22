"""Automatic lesion-box generation from probability maps.

Externally produced saliency or segmentation outputs are ingested as
per-pixel probability maps; this module binarizes them, labels connected
foreground regions, drops small components and extracts compact boxes.
A contrast-based saliency stub stands in for a real saliency provider
in tests and desk-scale runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .annotations import BoundingBox

__all__ = [
    "ProbabilityMap",
    "ComponentLabeling",
    "binarize",
    "label_components",
    "extract_boxes",
    "boxes_from_probability_map",
    "stub_saliency",
    "load_probability_map",
    "save_probability_map",
]

SOURCES = ("saliency", "segmentation", "stub")


@dataclass
class ProbabilityMap:
    """Per-pixel probability of lesion presence, values in [0, 1]."""

    values: np.ndarray
    source: str = "saliency"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"probability map must be 2-D, got shape {v.shape}")
        if not np.isfinite(v).all() or v.min() < 0 or v.max() > 1:
            raise ValueError("probability map values must be finite and in [0, 1]")
        self.values = v


@dataclass
class ComponentLabeling:
    """Connected foreground regions: 0 = background, 1..K = components."""

    labels: np.ndarray
    areas: np.ndarray

    @property
    def num_components(self) -> int:
        return len(self.areas)


def binarize(pmap: ProbabilityMap, threshold: float = 0.5) -> np.ndarray:
    """Foreground iff value >= threshold (a pixel exactly at the threshold
    counts as foreground)."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return (pmap.values >= threshold).astype(np.uint8)


class _UnionFind:
    def __init__(self):
        self.parent: list[int] = []

    def make(self) -> int:
        self.parent.append(len(self.parent))
        return len(self.parent) - 1

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:  # path compression
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def label_components(binary: np.ndarray, connectivity: int = 8) -> ComponentLabeling:
    """Two-pass union-find labeling of foreground regions.

    First pass scans row-major, assigning provisional labels from already
    visited neighbors and recording equivalences; second pass resolves
    them. Final labels are renumbered 1..K in order of first appearance.
    """
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    binary = np.asarray(binary)
    if not np.isin(binary, (0, 1)).all():
        raise ValueError("label_components expects a binary image")
    h, w = binary.shape
    provisional = np.zeros((h, w), dtype=np.int64)
    uf = _UnionFind()
    uf.make()  # index 0 reserved for background

    # prior neighbors in scan order
    if connectivity == 4:
        offsets = [(-1, 0), (0, -1)]
    else:
        offsets = [(-1, -1), (-1, 0), (-1, 1), (0, -1)]

    for i in range(h):
        for j in range(w):
            if not binary[i, j]:
                continue
            neighbor_labels = []
            for di, dj in offsets:
                ni, nj = i + di, j + dj
                if 0 <= ni < h and 0 <= nj < w and provisional[ni, nj]:
                    neighbor_labels.append(provisional[ni, nj])
            if not neighbor_labels:
                provisional[i, j] = uf.make()
            else:
                lo = min(neighbor_labels)
                provisional[i, j] = lo
                for other in neighbor_labels:
                    uf.union(lo, other)

    labels = np.zeros((h, w), dtype=np.int64)
    final: dict[int, int] = {}
    for i in range(h):
        for j in range(w):
            if not binary[i, j]:
                continue
            root = uf.find(provisional[i, j])
            if root not in final:
                final[root] = len(final) + 1
            labels[i, j] = final[root]

    k = len(final)
    areas = np.bincount(labels.ravel(), minlength=k + 1)[1:]
    return ComponentLabeling(labels=labels, areas=areas)


def extract_boxes(
    labeling: ComponentLabeling,
    min_area_fraction: float = 0.01,
    keep: str = "largest",
) -> list[BoundingBox]:
    """Tight boxes of the surviving components.

    Components smaller than ``min_area_fraction`` of the image are
    discarded. ``keep="largest"`` returns at most the single biggest
    component (ties broken by smallest label); ``keep="all"`` returns one
    box per survivor, in label order. Empty list when nothing survives.
    """
    if not 0 <= min_area_fraction < 1:
        raise ValueError(f"min_area_fraction must be in [0, 1), got {min_area_fraction}")
    if keep not in ("largest", "all"):
        raise ValueError(f"keep must be 'largest' or 'all', got {keep!r}")
    labels = labeling.labels
    h, w = labels.shape
    min_area = min_area_fraction * h * w
    survivors = [k for k in range(1, labeling.num_components + 1) if labeling.areas[k - 1] >= min_area]
    if not survivors:
        return []
    if keep == "largest":
        survivors = [max(survivors, key=lambda k: (labeling.areas[k - 1], -k))]
    boxes = []
    for k in survivors:
        ys, xs = np.nonzero(labels == k)
        boxes.append(BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())))
    return boxes


def boxes_from_probability_map(
    pmap: ProbabilityMap,
    threshold: float = 0.5,
    min_area_fraction: float = 0.01,
    keep: str = "largest",
    connectivity: int = 8,
) -> list[BoundingBox]:
    """Full post-processing chain: binarize -> label -> filter -> boxes.

    Returns an empty list when no component survives; callers decide the
    fallback (the CLI falls back to a whole-image box with a warning).
    """
    return extract_boxes(
        label_components(binarize(pmap, threshold), connectivity),
        min_area_fraction,
        keep,
    )


def stub_saliency(image: np.ndarray, blur_size: int | None = None) -> ProbabilityMap:
    """Local-contrast saliency stand-in for an external saliency provider.

    Absolute deviation of the grayscale image from a box-blurred copy,
    min-max normalized. Deterministic; a constant image maps to all zeros.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:  # (C, H, W) -> grayscale
        img = img.mean(axis=0)
    h, w = img.shape
    if blur_size is None:
        blur_size = max(3, (min(h, w) // 8) | 1)
    blurred = ndimage.uniform_filter(img, size=blur_size, mode="nearest")
    contrast = np.abs(img - blurred)
    lo, hi = contrast.min(), contrast.max()
    if hi - lo < 1e-12:
        values = np.zeros_like(contrast)
    else:
        values = (contrast - lo) / (hi - lo)
    return ProbabilityMap(values=values, source="stub")


def load_probability_map(path: str | Path, source: str = "saliency") -> ProbabilityMap:
    """Read an 8-bit grayscale image as a probability map (value / 255)."""
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0
    return ProbabilityMap(values=arr, source=source)


def save_probability_map(path: str | Path, pmap: ProbabilityMap) -> None:
    arr = np.clip(np.round(pmap.values * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)
