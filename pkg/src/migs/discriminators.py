"""Two-scale patch discriminator on whole images and an object discriminator on box crops."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .sampling import bilinear_sample


def crop_objects(
    images: torch.Tensor,
    boxes: torch.Tensor,
    crop_size: int,
    obj_to_img: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Bilinear crop-and-resize of every box to ``crop_size`` x ``crop_size``.

    ``images`` is [3, H, W] (all boxes from that image) or [B, 3, H, W] with ``obj_to_img``.
    Returns [N, 3, c, c].
    """
    if images.dim() == 3:
        images = images.unsqueeze(0)
        obj_to_img = torch.zeros(boxes.shape[0], dtype=torch.long, device=boxes.device)
    N = boxes.shape[0]
    _, C, H, W = images.shape
    c = crop_size
    if N == 0:
        return images.new_zeros(0, C, c, c)
    t = (torch.arange(c, dtype=boxes.dtype, device=boxes.device) + 0.5) / c
    x0, y0, x1, y1 = (boxes[:, k : k + 1] for k in range(4))
    xs = (x0 + t.unsqueeze(0) * (x1 - x0)) * W - 0.5  # [N, c]
    ys = (y0 + t.unsqueeze(0) * (y1 - y0)) * H - 0.5
    xs = xs.unsqueeze(1).expand(N, c, c).reshape(N, c * c)
    ys = ys.unsqueeze(2).expand(N, c, c).reshape(N, c * c)
    return bilinear_sample(images[obj_to_img], xs, ys).view(N, C, c, c)


def _conv_stack(channels: list[int], slope: float) -> nn.Sequential:
    layers = []
    for c_in, c_out in zip(channels[:-1], channels[1:]):
        layers += [nn.Conv2d(c_in, c_out, 4, stride=2, padding=1), nn.LeakyReLU(slope)]
    return nn.Sequential(*layers)


@dataclass
class DiscriminatorConfig:
    global_channels: list[int] = field(default_factory=lambda: [32, 64, 128])
    object_channels: list[int] = field(default_factory=lambda: [32, 64, 128])
    object_trunk: int = 256
    crop_size: int = 32
    leaky_slope: float = 0.2

    def __post_init__(self):
        c = self.crop_size
        if c <= 0 or c & (c - 1):
            raise ValueError(f"crop_size must be a power of two, got {c}")
        if 2 ** len(self.object_channels) > c:
            raise ValueError("object conv stack downsamples below 1 pixel")


class PatchScorer(nn.Module):
    def __init__(self, channels: list[int], slope: float):
        super().__init__()
        self.features = _conv_stack([3] + channels, slope)
        self.score = nn.Conv2d(channels[-1], 1, 3, padding=1)

    def forward(self, x):
        return self.score(self.features(x))


class GlobalDiscriminator(nn.Module):
    """Score maps (raw logits) at full and half resolution."""

    def __init__(self, config: Optional[DiscriminatorConfig] = None):
        super().__init__()
        config = config or DiscriminatorConfig()
        self.scale1 = PatchScorer(config.global_channels, config.leaky_slope)
        self.scale2 = PatchScorer(config.global_channels, config.leaky_slope)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        if images.dim() == 3:
            images = images.unsqueeze(0)
        return [self.scale1(images), self.scale2(F.avg_pool2d(images, 2))]


class ObjectDiscriminator(nn.Module):
    def __init__(self, num_classes: int, config: Optional[DiscriminatorConfig] = None):
        super().__init__()
        config = config or DiscriminatorConfig()
        self.crop_size = config.crop_size
        self.num_classes = num_classes
        self.features = _conv_stack([3] + config.object_channels, config.leaky_slope)
        side = config.crop_size // 2 ** len(config.object_channels)
        self.trunk = nn.Sequential(
            nn.Flatten(), nn.Linear(config.object_channels[-1] * side * side, config.object_trunk),
            nn.LeakyReLU(config.leaky_slope),
        )
        self.real_fake = nn.Linear(config.object_trunk, 1)
        self.classify = nn.Linear(config.object_trunk, num_classes)

    def forward(self, crops: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.trunk(self.features(crops))
        return self.real_fake(h).squeeze(1), self.classify(h)
