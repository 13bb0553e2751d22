"""Gradient-weighted class activation maps.

A map for class c is built in three steps: per-channel weights from the
spatially averaged gradient of the class score, a weighted channel sum
over the feature stack, and normalization + bilinear upsampling to image
resolution. The whole chain is torch-differentiable so the attention loss
can train through it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as nnf

from .annotations import BoundingBox
from .backbone import BackboneOutput, class_score_gradient, true_class_score_gradient

__all__ = [
    "ActivationMap",
    "channel_weights",
    "raw_cam",
    "bilinear_resize",
    "normalize_and_resize",
    "true_class_cams",
    "cam_for_true_class",
    "render_overlay",
]

# treat a map whose spread is below this as carrying no signal
FLAT_EPS = 1e-12


@dataclass
class ActivationMap:
    """Normalized class-discriminative map at image resolution.

    ``values`` lie in [0, 1]; unless the unnormalized map was flat, the
    max is exactly 1 and the min exactly 0. ``pre_norm_range`` keeps the
    (min, max) of the unnormalized map for diagnostics.
    """

    values: np.ndarray
    source_class: int | None = None
    pre_norm_range: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError(f"activation map must be 2-D, got shape {v.shape}")
        if v.size and (not np.isfinite(v).all() or v.min() < 0 or v.max() > 1):
            raise ValueError("activation map values must be finite and in [0, 1]")
        self.values = v


def channel_weights(
    output: BackboneOutput,
    class_index: int,
    create_graph: bool = False,
) -> torch.Tensor:
    """Spatial average of the class-score gradient per channel, (B, d)."""
    grads = class_score_gradient(output, class_index, create_graph=create_graph)
    return grads.mean(dim=(2, 3))


def raw_cam(features: torch.Tensor, weights: torch.Tensor, clamp_negative: bool = True) -> torch.Tensor:
    """Channel-weighted sum of the feature stack, (B, u, v).

    ``clamp_negative`` zeroes negative entries before normalization
    (standard practice; configurable because either reading is defensible).
    """
    if features.shape[:2] != weights.shape:
        raise ValueError(
            f"features {tuple(features.shape)} and weights {tuple(weights.shape)} disagree"
        )
    cam = torch.einsum("bkuv,bk->buv", features, weights)
    return torch.relu(cam) if clamp_negative else cam


def bilinear_resize(maps: torch.Tensor, target_hw: tuple[int, int]) -> torch.Tensor:
    """Bilinear upsampling of (B, u, v) maps to (B, H, W), half-pixel centers."""
    resized = nnf.interpolate(maps.unsqueeze(1), size=target_hw, mode="bilinear", align_corners=False)
    return resized.squeeze(1)


def normalize_and_resize(raw: torch.Tensor, target_hw: tuple[int, int]) -> torch.Tensor:
    """Min-max normalize to [0, 1] at image resolution, (B, H, W).

    Resizing happens first so the normalized extremes (exact 0 and 1) are
    attained at full resolution; bilinear interpolation commutes with the
    affine normalization, so this matches normalizing first up to the
    positive rescaling the normalization removes anyway. A flat map comes
    out all zeros instead of dividing by (almost) nothing.
    """
    if raw.ndim == 2:
        raw = raw.unsqueeze(0)
    resized = bilinear_resize(raw, target_hw)
    lo = resized.amin(dim=(1, 2), keepdim=True)
    hi = resized.amax(dim=(1, 2), keepdim=True)
    flat = (hi - lo) < FLAT_EPS
    span = torch.where(flat, torch.ones_like(hi), hi - lo)
    normalized = (resized - lo) / span
    return torch.where(flat, torch.zeros_like(normalized), normalized)


def true_class_cams(
    output: BackboneOutput,
    labels: torch.Tensor,
    target_hw: tuple[int, int],
    clamp_negative: bool = True,
    detach_channel_weights: bool = False,
    create_graph: bool = False,
) -> torch.Tensor:
    """Activation maps for each image's ground-truth class, (B, H, W).

    ``detach_channel_weights`` treats the per-channel weights as constants
    for the current step (first-order training); otherwise pass
    ``create_graph=True`` to backpropagate through them (second order).
    """
    grads = true_class_score_gradient(output, labels, create_graph=create_graph and not detach_channel_weights)
    weights = grads.mean(dim=(2, 3))
    if detach_channel_weights:
        weights = weights.detach()
    return normalize_and_resize(raw_cam(output.features, weights, clamp_negative), target_hw)


def cam_for_true_class(
    output: BackboneOutput,
    labels: torch.Tensor,
    target_hw: tuple[int, int],
    clamp_negative: bool = True,
) -> list[ActivationMap]:
    """Per-image ActivationMap objects for the ground-truth classes."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    grads = true_class_score_gradient(output, labels)
    weights = grads.mean(dim=(2, 3)).detach()
    raw = raw_cam(output.features.detach(), weights, clamp_negative)
    full = normalize_and_resize(raw, target_hw)
    maps = []
    for i in range(len(labels)):
        maps.append(
            ActivationMap(
                values=full[i].cpu().numpy(),
                source_class=int(labels[i]),
                pre_norm_range=(float(raw[i].min()), float(raw[i].max())),
            )
        )
    return maps


def render_overlay(
    image: np.ndarray,
    amap: ActivationMap,
    path: str | Path,
    boxes: list[BoundingBox] | None = None,
    alpha: float = 0.5,
) -> None:
    """Save the map as a heatmap PNG alpha-blended over the input image.

    ``image`` is (C, H, W) or (H, W) with values in [0, 1]; output pixel
    dimensions equal the input's. Boxes, when given, are drawn as 1-px red
    outlines (display only).
    """
    from matplotlib import colormaps
    from PIL import Image

    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.stack([img] * 3)
    base = np.transpose(img[:3], (1, 2, 0))
    if base.shape[-1] == 1:
        base = np.repeat(base, 3, axis=-1)
    heat = colormaps["jet"](amap.values)[..., :3]
    blended = (1.0 - alpha) * base + alpha * heat
    out = np.clip(np.round(blended * 255.0), 0, 255).astype(np.uint8)
    for box in boxes or []:
        out[box.y_min, box.x_min : box.x_max + 1] = (255, 0, 0)
        out[box.y_max, box.x_min : box.x_max + 1] = (255, 0, 0)
        out[box.y_min : box.y_max + 1, box.x_min] = (255, 0, 0)
        out[box.y_min : box.y_max + 1, box.x_max] = (255, 0, 0)
    Image.fromarray(out).save(path)
