"""Guided segmentation head and the teacher/student similarity features it consumes."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .blocks import RCM, BlockConfig, PAResidualBlock
from .pyramid import FeaturePyramid, scaled_channels

SEG_WIDTHS = (128, 64)


def cosine_similarity_map(ft: Tensor, fs: Tensor, eps: float = 1e-8) -> Tensor:
    """Per-position normalized channel product of two feature maps.

    For each spatial location the two C-vectors are multiplied elementwise and
    divided by the product of their L2 norms (plus ``eps``), so the channel sum
    is the cosine similarity in [-1, 1]. Zero vectors yield similarity 0.
    """
    if ft.shape != fs.shape:
        raise ValueError(f"shape mismatch: {tuple(ft.shape)} vs {tuple(fs.shape)}")
    denom = ft.norm(dim=1, keepdim=True) * fs.norm(dim=1, keepdim=True) + eps
    return ft * fs / denom


def build_seg_input(
    teacher_py: FeaturePyramid, student_py: FeaturePyramid, eps: float = 1e-8
) -> Tensor:
    """Concatenated similarity maps, upsampled to the stride-4 level.

    Returns (B, C1+C2+C3, H/4, W/4); 448 channels at full width.
    """
    teacher_py.validate_matches(student_py)
    sims = [cosine_similarity_map(t, s, eps) for t, s in zip(teacher_py, student_py)]
    size = sims[0].shape[-2:]
    upsampled = [sims[0]] + [
        F.interpolate(x, size=size, mode="bilinear", align_corners=False) for x in sims[1:]
    ]
    return torch.cat(upsampled, dim=1)


class SegmentationHead(nn.Module):
    """Two stride-1 PA residual blocks, an optional RCM, and a sigmoid 1x1 head.

    Consumes the similarity stack from :func:`build_seg_input` and emits a
    per-pixel anomaly probability map at 1/4 input resolution.
    """

    def __init__(
        self,
        in_channels: int,
        use_rcm: bool = True,
        use_aff: bool = True,
        use_pcar: bool = True,
        channel_scale: float = 1.0,
    ):
        super().__init__()
        w1, w2 = scaled_channels(SEG_WIDTHS, channel_scale)
        flags = {"use_aff": use_aff, "use_pcar": use_pcar}
        self.block1 = PAResidualBlock(BlockConfig(in_channels, w1, 1, **flags))
        self.block2 = PAResidualBlock(BlockConfig(w1, w2, 1, **flags))
        self.rcm = RCM(w2) if use_rcm else None
        self.head = nn.Conv2d(w2, 1, 1)

    def forward(self, x: Tensor) -> Tensor:
        """Returns probabilities in [0, 1], shape (B, H, W)."""
        h = self.block2(self.block1(x))
        if self.rcm is not None:
            h = self.rcm(h)
        return torch.sigmoid(self.head(h)).squeeze(1)


def image_score(prob: np.ndarray, top_k: int = 100) -> float:
    """Image-level anomaly score: mean of the ``top_k`` largest map values.

    ``top_k`` larger than the pixel count is clamped; ``top_k=1`` gives the
    maximum. Monotone in the map values.
    """
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    flat = np.asarray(prob, dtype=np.float64).ravel()
    k = min(top_k, flat.size)
    return float(np.partition(flat, flat.size - k)[flat.size - k :].mean())
