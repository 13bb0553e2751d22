"""Classifier backbone contract and the small reference CNN.

Every consumer of a backbone needs three things from one forward pass:
the last-convolution feature stack, the class logits, and the ability to
take gradients of any class score with respect to those features
(second-order differentiable, so the attention loss can backpropagate
through them). The reference CNN keeps all of that cheap enough for
CPU-scale training and finite-difference checking.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

__all__ = [
    "BackboneConfig",
    "ImageBatch",
    "BackboneOutput",
    "ReferenceCNN",
    "class_score_gradient",
    "save_checkpoint",
    "load_checkpoint",
]


class ConfigurationError(ValueError):
    """Backbone/input disagreement or invalid construction parameters."""


@dataclass
class BackboneConfig:
    input_size: int = 64
    in_channels: int = 3
    num_classes: int = 3
    channel_widths: tuple[int, ...] = (16, 32, 64)
    class_names: list[str] | None = None

    def __post_init__(self):
        if self.input_size % (2 ** len(self.channel_widths)) != 0:
            raise ConfigurationError(
                f"input_size {self.input_size} not divisible by the "
                f"{2 ** len(self.channel_widths)}x downsampling of {len(self.channel_widths)} blocks"
            )
        if self.num_classes < 2:
            raise ConfigurationError("need at least 2 classes")

    @property
    def feature_size(self) -> int:
        return self.input_size // (2 ** len(self.channel_widths))

    @property
    def feature_channels(self) -> int:
        return self.channel_widths[-1]


@dataclass
class ImageBatch:
    """Pixels (B, C, H, W) in [0, 1] plus integer class labels in [0, C)."""

    pixels: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        self.pixels = torch.as_tensor(self.pixels)
        self.labels = torch.as_tensor(self.labels, dtype=torch.long)
        if self.pixels.ndim != 4:
            raise ValueError(f"pixels must be (B, C, H, W), got shape {tuple(self.pixels.shape)}")
        if len(self.labels) != len(self.pixels):
            raise ValueError("labels/pixels length mismatch")
        if not torch.isfinite(self.pixels).all():
            raise ValueError("non-finite pixel values")
        if self.pixels.numel() and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise ValueError("pixel values outside [0, 1]")

    def __len__(self) -> int:
        return len(self.pixels)


@dataclass
class BackboneOutput:
    """Logits and features from one consistent pass.

    ``features`` stays attached to the autograd graph of the same forward,
    which is the handle for class-score gradients.
    """

    logits: torch.Tensor
    features: torch.Tensor


class ReferenceCNN(nn.Module):
    """Three conv blocks (3x3 conv -> ReLU -> 2x average pool), then a
    global-average-pool + bias-free linear head.

    The head is exactly GAP followed by a linear map, so the class score
    equals sum_k w_kc * mean_ij(A_ijk) and the score gradient at every
    feature location of channel k is the constant w_kc / (u*v). Average
    pooling (rather than max) keeps the network piecewise smooth for
    finite-difference tests.
    """

    def __init__(self, config: BackboneConfig, seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        blocks = []
        prev = config.in_channels
        for width in config.channel_widths:
            blocks += [nn.Conv2d(prev, width, kernel_size=3, padding=1), nn.ReLU(), nn.AvgPool2d(2)]
            prev = width
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Linear(config.feature_channels, config.num_classes, bias=False)
        self._init_parameters(seed)
        self.to(dtype)

    def _init_parameters(self, seed: int) -> None:
        # uniform fan-in scaling, from a private generator for reproducibility
        gen = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
            elif isinstance(module, nn.Linear):
                fan_in = module.in_features
            else:
                continue
            bound = 1.0 / np.sqrt(fan_in)
            with torch.no_grad():
                module.weight.uniform_(-bound, bound, generator=gen)
                if module.bias is not None:
                    module.bias.uniform_(-bound, bound, generator=gen)

    @property
    def dtype(self) -> torch.dtype:
        return self.head.weight.dtype

    def forward(self, batch: ImageBatch) -> BackboneOutput:
        pixels = batch.pixels.to(self.dtype)
        if pixels.shape[1] != self.config.in_channels or pixels.shape[2] != self.config.input_size \
                or pixels.shape[3] != self.config.input_size:
            raise ConfigurationError(
                f"batch shape {tuple(pixels.shape)} does not match backbone configured for "
                f"{self.config.in_channels}x{self.config.input_size}x{self.config.input_size}"
            )
        features = self.blocks(pixels)
        # make feature gradients available even when parameters are frozen
        if not features.requires_grad and torch.is_grad_enabled():
            features.requires_grad_(True)
        logits = self.head(features.mean(dim=(2, 3)))
        return BackboneOutput(logits=logits, features=features)


def class_score_gradient(
    output: BackboneOutput,
    class_index: int,
    create_graph: bool = False,
) -> torch.Tensor:
    """d(class score)/d(features) for every batch element, shape (B, d, u, v).

    Images are processed independently, so differentiating the summed
    class score gives each element its own gradient. Works for any head
    between features and logits, however many dense layers it has.
    ``create_graph=True`` makes the result differentiable in turn.
    """
    num_classes = output.logits.shape[1]
    if not 0 <= class_index < num_classes:
        raise ValueError(f"class_index {class_index} out of range [0, {num_classes})")
    score = output.logits[:, class_index].sum()
    (grad,) = torch.autograd.grad(score, output.features, retain_graph=True, create_graph=create_graph)
    return grad


def true_class_score_gradient(
    output: BackboneOutput,
    labels: torch.Tensor,
    create_graph: bool = False,
) -> torch.Tensor:
    """Per-image gradient of each image's own true-class score."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    score = output.logits.gather(1, labels.view(-1, 1)).sum()
    (grad,) = torch.autograd.grad(score, output.features, retain_graph=True, create_graph=create_graph)
    return grad


def save_checkpoint(path: str | Path, model: ReferenceCNN) -> None:
    """Write parameters plus configuration as a single .npz container.

    Layout: key "config" holds UTF-8 JSON (backbone configuration and
    dtype); every parameter is stored under "param/<state-dict-name>".
    """
    cfg = asdict(model.config)
    cfg["dtype"] = str(model.dtype).replace("torch.", "")
    arrays = {"config": np.frombuffer(json.dumps(cfg, sort_keys=True).encode(), dtype=np.uint8)}
    for name, tensor in model.state_dict().items():
        arrays[f"param/{name}"] = tensor.detach().cpu().numpy()
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path, dtype: torch.dtype | None = None) -> ReferenceCNN:
    with np.load(path) as data:
        cfg = json.loads(bytes(data["config"]).decode())
        stored_dtype = getattr(torch, cfg.pop("dtype"))
        cfg["channel_widths"] = tuple(cfg["channel_widths"])
        model = ReferenceCNN(BackboneConfig(**cfg), dtype=dtype or stored_dtype)
        state = {k[len("param/"):]: torch.as_tensor(data[k]) for k in data.files if k.startswith("param/")}
    model.load_state_dict({k: v.to(model.dtype) for k, v in state.items()})
    return model
