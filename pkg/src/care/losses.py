"""Training objectives: classification losses and the attention loss.

The attention loss compares each annotated image's activation map with
its box masks: activation mass inside the boxes is rewarded up to a
threshold, mass outside is penalized. The total objective mixes the
classification and attention terms with a single coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as nnf

from .annotations import MaskPair

__all__ = [
    "LossConfig",
    "LossBreakdown",
    "inner_loss",
    "outer_loss",
    "attention_loss",
    "total_loss",
    "weighted_cross_entropy",
    "focal_loss",
    "classification_loss",
    "inverse_frequency_weights",
]


class LossConfigError(ValueError):
    pass


@dataclass
class LossConfig:
    """Coefficients of the training objective.

    alpha mixes classification vs attention terms; lambda_out weighs the
    outside-box penalty against the inside-box reward; tau caps the reward
    once mean inside-box activation reaches it. class_weights enables
    cost-sensitive weighting, focal_gamma focal modulation; both are off
    by default. detach_channel_weights switches the attention gradient to
    first-order (activation-map channel weights treated as constants per
    step) instead of the default full second-order differentiation.
    """

    alpha: float = 0.5
    lambda_out: float = 1.0
    tau: float = 0.5
    class_weights: list[float] | None = None
    focal_gamma: float | None = None
    detach_channel_weights: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise LossConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.lambda_out < 0:
            raise LossConfigError(f"lambda_out must be >= 0, got {self.lambda_out}")
        if not 0.0 < self.tau <= 1.0:
            raise LossConfigError(f"tau must be in (0, 1], got {self.tau}")
        if self.class_weights is not None:
            self.class_weights = [float(w) for w in self.class_weights]
            if any(w <= 0 for w in self.class_weights):
                raise LossConfigError("class_weights must be strictly positive")
        if self.focal_gamma is not None and self.focal_gamma < 0:
            raise LossConfigError(f"focal_gamma must be >= 0, got {self.focal_gamma}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    """Per-term loss values for one batch; tensors keep the graph alive."""

    total: torch.Tensor
    cross_entropy: torch.Tensor
    attention: torch.Tensor
    inner: torch.Tensor
    outer: torch.Tensor
    n_attended: int

    def scalars(self) -> dict:
        return {
            "total": float(self.total.detach()),
            "cross_entropy": float(self.cross_entropy.detach()),
            "attention": float(self.attention.detach()),
            "inner": float(self.inner.detach()),
            "outer": float(self.outer.detach()),
            "n_attended": self.n_attended,
        }


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    t = torch.as_tensor(x)
    if like is not None and t.dtype != like.dtype:
        t = t.to(like.dtype)
    return t


def inner_loss(cam: torch.Tensor, inside_mask, tau: float = 0.5) -> torch.Tensor:
    """Negated mean activation inside the boxes, capped at tau.

    The cap keeps the reward from pushing activation to fill the whole
    box; past the threshold the term is constant (zero gradient on the
    capped branch). Always in [-tau, 0].
    """
    cam = _as_tensor(cam)
    mask = _as_tensor(inside_mask, like=cam)
    mass = mask.sum()
    if float(mass) == 0.0:
        raise ValueError("inner_loss needs a non-empty inside mask")
    mean_inside = (mask * cam).sum() / mass
    return -torch.clamp(mean_inside, max=tau)


def outer_loss(cam: torch.Tensor, outside_mask) -> torch.Tensor:
    """Mean activation outside the boxes, in [0, 1].

    Zero when the boxes cover the whole image (nothing to penalize).
    """
    cam = _as_tensor(cam)
    mask = _as_tensor(outside_mask, like=cam)
    mass = mask.sum()
    if float(mass) == 0.0:
        return torch.zeros((), dtype=cam.dtype)
    return (mask * cam).sum() / mass


def attention_loss(
    cams: Sequence[torch.Tensor],
    masks: Sequence[MaskPair],
    cfg: LossConfig,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Combined attention terms averaged over the annotated images.

    Returns (attention, inner, outer) where attention = inner +
    lambda_out * outer and each term is the mean of its per-image values.
    """
    if len(cams) != len(masks) or not cams:
        raise ValueError("need matching, non-empty cams and masks")
    inner_terms = [inner_loss(c, m.inside, cfg.tau) for c, m in zip(cams, masks)]
    outer_terms = [outer_loss(c, m.outside) for c, m in zip(cams, masks)]
    inner = torch.stack(inner_terms).mean()
    outer = torch.stack(outer_terms).mean()
    return inner + cfg.lambda_out * outer, inner, outer


def weighted_cross_entropy(logits: torch.Tensor, labels: torch.Tensor, class_weights) -> torch.Tensor:
    """Cross entropy with per-class weights, normalized by total weight."""
    weights = _as_tensor(class_weights, like=logits)
    if (weights <= 0).any():
        raise LossConfigError("class weights must be strictly positive")
    return nnf.cross_entropy(logits, torch.as_tensor(labels, dtype=torch.long), weight=weights)


def focal_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    gamma: float,
    class_weights=None,
) -> torch.Tensor:
    """Mean of (1 - p_true)^gamma * (-log p_true); gamma=0 is plain CE."""
    if gamma < 0:
        raise LossConfigError(f"focal gamma must be >= 0, got {gamma}")
    labels = torch.as_tensor(labels, dtype=torch.long)
    nll = nnf.cross_entropy(logits, labels, reduction="none")
    p_true = torch.exp(-nll)
    terms = (1.0 - p_true) ** gamma * nll
    if class_weights is None:
        return terms.mean()
    weights = _as_tensor(class_weights, like=logits)
    if (weights <= 0).any():
        raise LossConfigError("class weights must be strictly positive")
    sample_w = weights[labels]
    return (sample_w * terms).sum() / sample_w.sum()


def classification_loss(logits: torch.Tensor, labels: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Dispatch on the configured classification objective."""
    if cfg.focal_gamma is not None:
        return focal_loss(logits, labels, cfg.focal_gamma, cfg.class_weights)
    if cfg.class_weights is not None:
        return weighted_cross_entropy(logits, labels, cfg.class_weights)
    return nnf.cross_entropy(logits, torch.as_tensor(labels, dtype=torch.long))


def inverse_frequency_weights(class_counts: Sequence[int]) -> np.ndarray:
    """Per-class weights proportional to 1/count, rescaled to mean 1."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if (counts <= 0).any():
        raise LossConfigError("every class needs at least one sample for frequency weights")
    raw = 1.0 / counts
    return raw / raw.mean()


def total_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    cams,
    masks_by_image: Mapping[int, MaskPair],
    cfg: LossConfig,
) -> LossBreakdown:
    """Mix classification and attention terms into the training objective.

    ``masks_by_image`` maps batch indices of annotated images to their
    masks; ``cams`` must be indexable by those indices (full-resolution
    maps). Images without boxes contribute only to the classification
    term. A batch with no annotated image is trained on classification
    alone: the mixing would otherwise scale it by (1 - alpha) with no
    attention signal to make up the difference. Reduction order is fixed
    (ascending image index) so results are bit-stable.
    """
    ce = classification_loss(logits, labels, cfg)
    indices = sorted(masks_by_image)
    if not indices:
        zero = torch.zeros((), dtype=ce.dtype)
        return LossBreakdown(total=ce, cross_entropy=ce, attention=zero, inner=zero, outer=zero, n_attended=0)
    attended_cams = [cams[i] for i in indices]
    attended_masks = [masks_by_image[i] for i in indices]
    attention, inner, outer = attention_loss(attended_cams, attended_masks, cfg)
    total = (1.0 - cfg.alpha) * ce + cfg.alpha * attention
    return LossBreakdown(
        total=total,
        cross_entropy=ce,
        attention=attention,
        inner=inner,
        outer=outer,
        n_attended=len(indices),
    )
