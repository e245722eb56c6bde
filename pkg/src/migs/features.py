"""Fixed, seeded convolutional feature pyramid.

A single instance serves both the perceptual loss (all levels) and the distribution metrics
(global-average-pooled last level). Weights are buffers, never parameters, so no optimizer
can touch them.
"""
from __future__ import annotations

import hashlib
import math
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class FeatureExtractor(nn.Module):
    def __init__(self, channels: Sequence[int] = (16, 32, 64, 64), seed: int = 0, slope: float = 0.2):
        super().__init__()
        self.channels = tuple(int(c) for c in channels)
        self.seed = seed
        self.slope = slope
        gen = torch.Generator().manual_seed(seed)
        c_in = 3
        for k, c in enumerate(self.channels):
            std = math.sqrt(2.0 / (c_in * 9))
            self.register_buffer(f"weight{k}", torch.randn(c, c_in, 3, 3, generator=gen) * std)
            self.register_buffer(f"bias{k}", torch.randn(c, generator=gen) * 0.1)
            c_in = c
        self.eval()

    @property
    def dim(self) -> int:
        return self.channels[-1]

    def train(self, mode: bool = True):
        return super().train(False)

    def pyramid(self, images: torch.Tensor) -> list[torch.Tensor]:
        """Feature maps of every level for images in [0, 1], shape [N, 3, H, W]."""
        x = (images - 0.5) / 0.25
        levels = []
        for k in range(len(self.channels)):
            x = F.conv2d(x, getattr(self, f"weight{k}"), getattr(self, f"bias{k}"), stride=2, padding=1)
            x = F.leaky_relu(x, self.slope)
            levels.append(x)
        return levels

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.pyramid(images)[-1].mean(dim=(2, 3))

    def fingerprint(self) -> str:
        h = hashlib.sha256(repr((self.channels, self.seed, self.slope)).encode())
        for k in range(len(self.channels)):
            for name in (f"weight{k}", f"bias{k}"):
                h.update(getattr(self, name).detach().to(torch.float32).cpu().numpy().tobytes())
        return h.hexdigest()[:16]


@torch.no_grad()
def extract_features(images, extractor: FeatureExtractor, batch_size: int = 64) -> np.ndarray:
    """Embed images ([N, H, W, 3] array or [N, 3, H, W] tensor, values in [0, 1]) -> [N, d] float64."""
    if isinstance(images, np.ndarray) or isinstance(images, (list, tuple)):
        arr = np.asarray(images, dtype=np.float32)
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise ValueError(f"expected [N, H, W, 3] images, got {arr.shape}")
        tensor = torch.from_numpy(arr).permute(0, 3, 1, 2)
    else:
        tensor = images
    if tensor.shape[0] == 0:
        raise ValueError("no images to embed")
    dtype = getattr(extractor, "weight0").dtype
    rows = [extractor(tensor[i : i + batch_size].to(dtype)) for i in range(0, tensor.shape[0], batch_size)]
    return torch.cat(rows).to(torch.float64).numpy()
