"""Loss terms of the scene-graph-to-image task loss and their weighted combination."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .features import FeatureExtractor

LOG_CLAMP = math.log(1e-7)


@dataclass
class LossWeights:
    box: float = 10.0
    gan_global: float = 0.01
    gan_obj: float = 0.01
    aux: float = 0.1
    perceptual: float = 1.0
    image: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be nonnegative")


@dataclass
class LossBreakdown:
    box: float | torch.Tensor = 0.0
    gan_global_g: float | torch.Tensor = 0.0
    gan_global_d: float | torch.Tensor = 0.0
    gan_obj_g: float | torch.Tensor = 0.0
    gan_obj_d: float | torch.Tensor = 0.0
    aux: float | torch.Tensor = 0.0
    aux_d: float | torch.Tensor = 0.0
    perceptual: float | torch.Tensor = 0.0
    image_l1: float | torch.Tensor = 0.0
    total_g: float | torch.Tensor = 0.0
    total_d: float | torch.Tensor = 0.0

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(torch.as_tensor(getattr(self, f.name)).detach()) for f in fields(self)}


def _log_d(logits: torch.Tensor) -> torch.Tensor:
    return F.logsigmoid(logits).clamp(min=LOG_CLAMP)


def _log_one_minus_d(logits: torch.Tensor) -> torch.Tensor:
    return F.logsigmoid(-logits).clamp(min=LOG_CLAMP)


def gan_objective(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """E log D(real) + E log(1 - D(fake)) with D = sigmoid(logit); at most 0."""
    return _log_d(real_logits).mean() + _log_one_minus_d(fake_logits).mean()


def gan_loss_d(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """The discriminator maximizes the GAN objective, i.e. minimizes its negation."""
    return -gan_objective(real_logits, fake_logits)


def gan_loss_g(fake_logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss -E log D(fake)."""
    return -_log_d(fake_logits).mean()


def _scale_logits(maps) -> list[torch.Tensor]:
    return list(maps) if isinstance(maps, (list, tuple)) else [maps]


def multiscale_gan_loss_d(real_maps, fake_maps) -> torch.Tensor:
    pairs = list(zip(_scale_logits(real_maps), _scale_logits(fake_maps)))
    return sum(gan_loss_d(r, f) for r, f in pairs) / len(pairs)


def multiscale_gan_loss_g(fake_maps) -> torch.Tensor:
    maps = _scale_logits(fake_maps)
    return sum(gan_loss_g(f) for f in maps) / len(maps)


def box_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    if pred.shape != gt.shape:
        raise ValueError(f"box shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return (pred - gt).abs().mean()


def image_l1(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    if pred.shape != gt.shape:
        raise ValueError(f"image shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return (pred - gt).abs().mean()


def perceptual_loss(pred: torch.Tensor, gt: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    """Sum over pyramid levels of mean absolute feature difference; inputs in [0, 1]."""
    if pred.dim() == 3:
        pred, gt = pred.unsqueeze(0), gt.unsqueeze(0)
    total = pred.new_zeros(())
    for a, b in zip(extractor.pyramid(pred), extractor.pyramid(gt)):
        total = total + (a - b).abs().mean()
    return total


def aux_obj_loss(class_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if labels.numel() and (labels.min() < 0 or labels.max() >= class_logits.shape[1]):
        raise ValueError("label outside the class range")
    return F.cross_entropy(class_logits, labels)


def total_task_loss(b: LossBreakdown, w: LossWeights):
    total_g = (
        w.box * b.box
        + w.gan_global * b.gan_global_g
        + w.gan_obj * b.gan_obj_g
        + w.aux * b.aux
        + w.perceptual * b.perceptual
        + w.image * b.image_l1
    )
    total_d = w.gan_global * b.gan_global_d + w.gan_obj * b.gan_obj_d + w.aux * b.aux_d
    return total_g, total_d
