"""Layout-to-image decoders.

Both decoders work coarse to fine over ``num_blocks`` resolutions ending at the layout size and
return images in [-1, 1].
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

PAPER_CHANNELS = [1024, 512, 256, 128, 64]
DESK_CHANNELS = [128, 64, 32, 16, 16]


def profile_channels(profile: str) -> list[int]:
    if profile == "paper":
        return list(PAPER_CHANNELS)
    if profile == "desk":
        return list(DESK_CHANNELS)
    raise ValueError(f"unknown decoder profile {profile!r}")


@dataclass
class CrnConfig:
    channels: list[int] = field(default_factory=lambda: list(DESK_CHANNELS))
    leaky_slope: float = 0.2
    noise_dim: int = 0

    def __post_init__(self):
        if not self.channels or any(c <= 0 for c in self.channels):
            raise ValueError("channels must be a non-empty list of positive ints")

    @property
    def num_blocks(self) -> int:
        return len(self.channels)


@dataclass
class SpadeConfig:
    channels: list[int] = field(default_factory=lambda: list(DESK_CHANNELS))
    modulation_width: int = 64
    noise_dim: int = 64
    leaky_slope: float = 0.2

    def __post_init__(self):
        if not self.channels or any(c <= 0 for c in self.channels):
            raise ValueError("channels must be a non-empty list of positive ints")
        if self.noise_dim <= 0 or self.modulation_width <= 0:
            raise ValueError("noise_dim and modulation_width must be positive")

    @property
    def num_blocks(self) -> int:
        return len(self.channels)


def check_resolution(H: int, W: int, num_blocks: int) -> None:
    f = 2 ** (num_blocks - 1)
    if H % f or W % f:
        raise ValueError(f"layout size {H}x{W} not divisible by {f} for {num_blocks} blocks")


def resize_layout(layout: torch.Tensor, h: int, w: int) -> torch.Tensor:
    if layout.shape[-2:] == (h, w):
        return layout
    return F.adaptive_avg_pool2d(layout, (h, w))


class CrnBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, slope: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, padding=1),
            nn.BatchNorm2d(c_out),
            nn.LeakyReLU(slope),
            nn.Conv2d(c_out, c_out, 3, padding=1),
            nn.BatchNorm2d(c_out),
            nn.LeakyReLU(slope),
        )

    def forward(self, x):
        return self.net(x)


class CrnGenerator(nn.Module):
    def __init__(self, layout_dim: int, config: Optional[CrnConfig] = None):
        super().__init__()
        self.config = config = config or CrnConfig()
        self.layout_dim = layout_dim
        blocks = []
        prev = 0
        for c in config.channels:
            blocks.append(CrnBlock(prev + layout_dim + config.noise_dim * (prev == 0), c, config.leaky_slope))
            prev = c
        self.blocks = nn.ModuleList(blocks)
        self.to_rgb = nn.Conv2d(prev, 3, 1)

    def forward(self, layout: torch.Tensor, noise: Optional[torch.Tensor] = None) -> torch.Tensor:
        squeeze = layout.dim() == 3
        if squeeze:
            layout = layout.unsqueeze(0)
            noise = None if noise is None else noise.reshape(1, -1)
        B, _, H, W = layout.shape
        nb = self.config.num_blocks
        check_resolution(H, W, nb)
        x = None
        for b, block in enumerate(self.blocks):
            f = 2 ** (nb - 1 - b)
            h, w = H // f, W // f
            parts = [resize_layout(layout, h, w)]
            if x is None:
                if self.config.noise_dim:
                    z = noise if noise is not None else layout.new_zeros(B, self.config.noise_dim)
                    parts.append(z.view(B, -1, 1, 1).expand(B, z.shape[1], h, w))
            else:
                parts.insert(0, F.interpolate(x, size=(h, w), mode="nearest"))
            x = block(torch.cat(parts, dim=1))
        out = torch.tanh(self.to_rgb(x))
        return out[0] if squeeze else out


class SpadeNorm(nn.Module):
    """Parameter-free batch normalization followed by layout-predicted per-pixel scale and shift."""

    def __init__(self, channels: int, layout_dim: int, hidden: int):
        super().__init__()
        self.norm = nn.BatchNorm2d(channels, affine=False)
        self.shared = nn.Sequential(nn.Conv2d(layout_dim, hidden, 3, padding=1), nn.ReLU())
        self.gamma = nn.Conv2d(hidden, channels, 3, padding=1)
        self.beta = nn.Conv2d(hidden, channels, 3, padding=1)

    def forward(self, x, layout):
        act = self.shared(layout)
        return self.norm(x) * (1 + self.gamma(act)) + self.beta(act)


class SpadeResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, layout_dim: int, hidden: int, slope: float):
        super().__init__()
        mid = min(c_in, c_out)
        self.norm0 = SpadeNorm(c_in, layout_dim, hidden)
        self.conv0 = nn.Conv2d(c_in, mid, 3, padding=1)
        self.norm1 = SpadeNorm(mid, layout_dim, hidden)
        self.conv1 = nn.Conv2d(mid, c_out, 3, padding=1)
        self.act = nn.LeakyReLU(slope)
        if c_in != c_out:
            self.norm_s = SpadeNorm(c_in, layout_dim, hidden)
            self.conv_s = nn.Conv2d(c_in, c_out, 1, bias=False)
        else:
            self.norm_s = None

    def forward(self, x, layout):
        skip = x if self.norm_s is None else self.conv_s(self.norm_s(x, layout))
        dx = self.conv0(self.act(self.norm0(x, layout)))
        dx = self.conv1(self.act(self.norm1(dx, layout)))
        return skip + dx


class SpadeGenerator(nn.Module):
    def __init__(self, layout_dim: int, config: Optional[SpadeConfig] = None, image_size: tuple[int, int] = (64, 64)):
        super().__init__()
        self.config = config = config or SpadeConfig()
        self.layout_dim = layout_dim
        H, W = image_size
        check_resolution(H, W, config.num_blocks)
        f = 2 ** (config.num_blocks - 1)
        self.image_size = (H, W)
        self.seed_size = (H // f, W // f)
        ch = config.channels
        self.project = nn.Linear(config.noise_dim, ch[0] * self.seed_size[0] * self.seed_size[1])
        self.blocks = nn.ModuleList()
        prev = ch[0]
        for c in ch:
            self.blocks.append(SpadeResBlock(prev, c, layout_dim, config.modulation_width, config.leaky_slope))
            prev = c
        self.to_rgb = nn.Conv2d(prev, 3, 3, padding=1)

    def forward(self, layout: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        squeeze = layout.dim() == 3
        if squeeze:
            layout = layout.unsqueeze(0)
            noise = noise.reshape(1, -1)
        B, _, H, W = layout.shape
        check_resolution(H, W, self.config.num_blocks)
        if (H, W) != self.image_size:
            raise ValueError(f"generator built for {self.image_size}, got layout {H}x{W}")
        if noise.shape != (B, self.config.noise_dim):
            raise ValueError(f"noise must be [{B}, {self.config.noise_dim}], got {list(noise.shape)}")
        h, w = self.seed_size
        x = self.project(noise).view(B, self.config.channels[0], h, w)
        for b, block in enumerate(self.blocks):
            if b > 0:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(x, resize_layout(layout, x.shape[2], x.shape[3]))
        out = torch.tanh(self.to_rgb(F.leaky_relu(x, self.config.leaky_slope)))
        return out[0] if squeeze else out


def build_generator(kind: str, layout_dim: int, channels: list[int], image_size: tuple[int, int], **kwargs):
    if kind == "crn":
        return CrnGenerator(layout_dim, CrnConfig(channels=channels, **kwargs))
    if kind == "spade":
        return SpadeGenerator(layout_dim, SpadeConfig(channels=channels, **kwargs), image_size)
    raise ValueError(f"unknown decoder {kind!r}")
