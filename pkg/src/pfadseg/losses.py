"""Training losses: distillation cosine distance, focal + L1 segmentation loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

from .exceptions import ConfigurationError
from .pyramid import FeaturePyramid
from .segmentation import cosine_similarity_map


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 4.0
    eps: float = 1e-7

    def __post_init__(self):
        if not math.isfinite(self.gamma) or self.gamma < 0:
            raise ConfigurationError(f"gamma must be finite and >= 0, got {self.gamma}")
        if not math.isfinite(self.eps) or self.eps <= 0:
            raise ConfigurationError(f"eps must be finite and > 0, got {self.eps}")


def cosine_distance_loss(
    teacher_py: FeaturePyramid, student_py: FeaturePyramid, eps: float = 1e-8
) -> Tensor:
    """Sum over pyramid levels of the mean per-position cosine distance.

    Each level contributes mean(1 - cos) over spatial positions, so for a
    three-level pyramid the value lies in [0, 6]. Averaged over the batch.
    """
    teacher_py.validate_matches(student_py)
    per_image = None
    for t, s in zip(teacher_py, student_py):
        sim = cosine_similarity_map(t, s, eps).sum(dim=1)
        dist = (1.0 - sim).mean(dim=(1, 2))
        per_image = dist if per_image is None else per_image + dist
    return per_image.mean()


def _check_prob_mask(prob: Tensor, mask: Tensor):
    if prob.shape != mask.shape:
        raise ValueError(f"shape mismatch: {tuple(prob.shape)} vs {tuple(mask.shape)}")
    if not torch.logical_or(mask == 0, mask == 1).all():
        raise ValueError("mask must be binary (0/1)")


def focal_loss(prob: Tensor, mask: Tensor, config: LossConfig = LossConfig()) -> Tensor:
    """Focal loss on per-pixel probabilities against a binary mask.

    q is the probability assigned to the true class; the loss is
    -mean((1-q)^gamma * log(q + eps)). gamma=0 recovers (eps-shifted)
    cross-entropy.
    """
    _check_prob_mask(prob, mask)
    m = mask.to(prob.dtype)
    q = m * prob + (1.0 - m) * (1.0 - prob)
    return -((1.0 - q) ** config.gamma * torch.log(q + config.eps)).mean()


def l1_loss(prob: Tensor, mask: Tensor) -> Tensor:
    """Mean absolute difference between the probability map and the mask."""
    _check_prob_mask(prob, mask)
    return (prob - mask.to(prob.dtype)).abs().mean()


def seg_loss(prob: Tensor, mask: Tensor, config: LossConfig = LossConfig()) -> Tensor:
    """Segmentation objective: focal term plus L1 term."""
    return focal_loss(prob, mask, config) + l1_loss(prob, mask)


def downsample_mask(mask: Tensor, factor: int = 4) -> Tensor:
    """Block-reduce a binary mask; a block is positive if any pixel in it is.

    Accepts (H, W) or (B, H, W); both spatial dims must be divisible by
    ``factor``.
    """
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    h, w = mask.shape[-2], mask.shape[-1]
    if h % factor or w % factor:
        raise ValueError(f"mask dims {(h, w)} not divisible by factor {factor}")
    shaped = mask.reshape(*mask.shape[:-2], h // factor, factor, w // factor, factor)
    return shaped.amax(dim=(-3, -1))
