"""Frozen teacher feature extractor.

A ResNet18-style backbone truncated after its third stage. Parameters are
frozen at construction and the module is pinned to eval mode, so its outputs
for a fixed input never change over a training run. Weights come from an
external archive (see :mod:`pfadseg.serialization`); a fixed-seed random
teacher is available for desk-scale experiments and tests.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .blocks import BlockConfig, PAResidualBlock
from .pyramid import PYRAMID_CHANNELS, FeaturePyramid, scaled_channels
from .serialization import (
    load_tensor_archive,
    module_digest,
    module_state_arrays,
    save_tensor_archive,
    validate_manifest,
)

# per-channel input normalization, the usual ImageNet statistics
INPUT_MEAN = (0.485, 0.456, 0.406)
INPUT_STD = (0.229, 0.224, 0.225)


def _plain_block(cin: int, cout: int, stride: int) -> PAResidualBlock:
    return PAResidualBlock(BlockConfig(cin, cout, stride, use_aff=False, use_pcar=False))


class TeacherNet(nn.Module):
    """Stem plus three residual stages, emitting a stride-4/8/16 pyramid.

    Args:
        channel_scale: width multiplier; 1.0 gives the standard 64/128/256
            pyramid, toy runs use 1/4.
    """

    def __init__(self, channel_scale: float = 1.0):
        super().__init__()
        self.channel_scale = channel_scale
        c1, c2, c3 = scaled_channels(PYRAMID_CHANNELS, channel_scale)
        self.stem = nn.Sequential(
            nn.Conv2d(3, c1, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(c1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.stage1 = nn.Sequential(_plain_block(c1, c1, 1), _plain_block(c1, c1, 1))
        self.stage2 = nn.Sequential(_plain_block(c1, c2, 2), _plain_block(c2, c2, 1))
        self.stage3 = nn.Sequential(_plain_block(c2, c3, 2), _plain_block(c3, c3, 1))
        self.register_buffer("input_mean", torch.tensor(INPUT_MEAN).view(1, 3, 1, 1))
        self.register_buffer("input_std", torch.tensor(INPUT_STD).view(1, 3, 1, 1))
        self.weight_digest: str | None = None
        for p in self.parameters():
            p.requires_grad_(False)
        super().train(False)

    def train(self, mode: bool = True) -> "TeacherNet":
        # the teacher never leaves eval mode, even inside a parent .train()
        return super().train(False)

    def forward(self, x: Tensor) -> FeaturePyramid:
        """Input (B, 3, H, W) in [0, 1] with H, W divisible by 16."""
        h, w = x.shape[-2:]
        if h % 16 or w % 16:
            raise ValueError(f"input dims must be divisible by 16, got {h}x{w}")
        x = (x - self.input_mean) / self.input_std
        x = self.stem(x)
        t1 = self.stage1(x)
        t2 = self.stage2(t1)
        t3 = self.stage3(t2)
        return FeaturePyramid(t1, t2, t3)

    def digest(self) -> str:
        """Content digest of the current parameters and buffers."""
        return module_digest(self)


def random_teacher(channel_scale: float = 1.0, seed: int = 0) -> TeacherNet:
    """Teacher with fixed-seed random weights; an explicit opt-in, never a fallback."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = TeacherNet(channel_scale)
    net.weight_digest = net.digest()
    return net


def save_teacher_weights(net: TeacherNet, path: str | Path) -> str:
    """Write the teacher's tensors to an archive; returns the archive digest."""
    digest = save_tensor_archive(
        path, module_state_arrays(net), meta={"arch": "teacher", "channel_scale": net.channel_scale}
    )
    net.weight_digest = net.digest()
    return digest


def load_pretrained(path: str | Path, channel_scale: float = 1.0) -> TeacherNet:
    """Load teacher weights from an archive, validating the full layer manifest.

    Raises:
        WeightLoadError: missing file or any layer name/dtype/shape mismatch
            (the first offender is named). Never falls back to random weights.
    """
    net = TeacherNet(channel_scale)
    tensors, _ = load_tensor_archive(path)
    expected = {
        name: (arr.dtype.str, tuple(arr.shape))
        for name, arr in module_state_arrays(net).items()
    }
    validate_manifest(tensors, expected)
    state = {name: torch.from_numpy(arr.copy() if not arr.flags["C_CONTIGUOUS"] else arr)
             for name, arr in tensors.items()}
    net.load_state_dict(state)
    net.weight_digest = net.digest()
    return net
