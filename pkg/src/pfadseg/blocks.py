"""Reusable network blocks: SPR, PCAR, AFF, RCM and the PA residual block.

All blocks are shape-preserving at stride 1 and fully differentiable; the
residual block additionally supports stride-2 downsampling with a projected
shortcut. Ablation flags select between the enhanced blocks and their plain
ResNet-style counterparts.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .exceptions import ConfigurationError


class SPR(nn.Module):
    """Spatial Pyramid Recalibration: multi-scale pooled sigmoid gating.

    The input is average-pooled to a pyramid of coarse grids (1x1, 2x2, 4x4 by
    default), each level passes a 1x1 convolution, is upsampled back to the
    input size and summed; the sigmoid of the sum gates the input
    multiplicatively, so zero input maps to zero output and the gate stays in
    (0, 1).
    """

    def __init__(self, channels: int, pool_sizes: tuple[int, ...] = (1, 2, 4)):
        super().__init__()
        self.pools = nn.ModuleList(nn.AdaptiveAvgPool2d(s) for s in pool_sizes)
        self.convs = nn.ModuleList(nn.Conv2d(channels, channels, 1) for _ in pool_sizes)

    def gate(self, x: Tensor) -> Tensor:
        size = x.shape[-2:]
        logits = None
        for pool, conv in zip(self.pools, self.convs):
            level = conv(pool(x))
            if level.shape[-2:] != size:
                level = F.interpolate(level, size=size, mode="bilinear", align_corners=False)
            logits = level if logits is None else logits + level
        return torch.sigmoid(logits)

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate(x)


class PCAR(nn.Module):
    """Parallel Convolutional Attention Recalibration.

    Three parallel 3x3 convolutions extract branch features F1..F3; each branch
    is recalibrated (SPR by default), the recalibrated branches are concatenated
    and globally average-pooled, and a softmax over the 3C pooled channels
    yields the channel weights. The weights rescale the concatenation of the
    raw branch features, and the three C-channel groups are summed to restore
    the input width.

    Args:
        channels: input and output channel count.
        recalibration: factory for the per-branch recalibration module; pass
            ``nn.Identity`` to bypass it.
    """

    branches = 3

    def __init__(self, channels: int, recalibration=SPR):
        super().__init__()
        self.channels = channels
        self.convs = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, padding=1) for _ in range(self.branches)
        )
        self.recalibrations = nn.ModuleList(recalibration(channels) for _ in range(self.branches))

    def channel_weights(self, x: Tensor) -> Tensor:
        """Softmax weights over the 3C concatenated channels, shape (B, 3C)."""
        _, weights = self._branches_and_weights(x)
        return weights

    def _branches_and_weights(self, x: Tensor) -> tuple[list[Tensor], Tensor]:
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        feats = [conv(x) for conv in self.convs]
        recalibrated = torch.cat(
            [recal(f) for recal, f in zip(self.recalibrations, feats)], dim=1
        )
        weights = torch.softmax(recalibrated.mean(dim=(2, 3)), dim=1)
        return feats, weights

    def forward(self, x: Tensor) -> Tensor:
        feats, weights = self._branches_and_weights(x)
        scaled = torch.cat(feats, dim=1) * weights[:, :, None, None]
        b, _, h, w = scaled.shape
        return scaled.reshape(b, self.branches, self.channels, h, w).sum(dim=1)


class AFF(nn.Module):
    """Attentional Feature Fusion: a learned convex gate over two inputs.

    The gate is computed from the sum of both inputs by a two-branch channel
    context network (globally pooled branch plus pointwise local branch, both
    with a bottleneck), squashed by a sigmoid. Output is
    ``alpha * main + (1 - alpha) * residual``, evaluated in the fused form
    ``residual + alpha * (main - residual)`` so equal inputs pass through
    bit-exactly.
    """

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.global_branch = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1),
        )
        self.local_branch = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1),
        )

    def gate(self, main: Tensor, residual: Tensor) -> Tensor:
        s = main + residual
        return torch.sigmoid(self.global_branch(s) + self.local_branch(s))

    def forward(self, main: Tensor, residual: Tensor) -> Tensor:
        if main.shape != residual.shape:
            raise ValueError(f"shape mismatch: {tuple(main.shape)} vs {tuple(residual.shape)}")
        alpha = self.gate(main, residual)
        return residual + alpha * (main - residual)


class RCM(nn.Module):
    """Rectangular Self-Calibration Module.

    Average-pools the input along each spatial axis, runs a large-kernel
    depthwise strip convolution over each pooled profile (replicate padding,
    so constant inputs yield constant attention), and multiplies the two
    profiles back together: the sigmoid of that product is a rectangular
    attention map. The gated features pass a 3x3 fusion convolution.
    """

    def __init__(self, channels: int, strip_kernel: int = 11):
        super().__init__()
        pad = strip_kernel // 2
        self.strip_h = nn.Conv2d(
            channels, channels, (strip_kernel, 1), padding=(pad, 0),
            padding_mode="replicate", groups=channels,
        )
        self.strip_w = nn.Conv2d(
            channels, channels, (1, strip_kernel), padding=(0, pad),
            padding_mode="replicate", groups=channels,
        )
        self.fuse = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm = nn.BatchNorm2d(channels)

    def attention(self, x: Tensor) -> Tensor:
        columns = x.mean(dim=3, keepdim=True)  # (B, C, H, 1)
        rows = x.mean(dim=2, keepdim=True)  # (B, C, 1, W)
        return torch.sigmoid(self.strip_h(columns) * self.strip_w(rows))

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.norm(self.fuse(x * self.attention(x))))


@dataclass(frozen=True)
class BlockConfig:
    """Plan for one residual block, including the ablation toggles."""

    in_channels: int
    out_channels: int
    stride: int = 1
    use_aff: bool = True
    use_pcar: bool = True

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ConfigurationError(f"stride must be 1 or 2, got {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError("channel counts must be positive")


class PAResidualBlock(nn.Module):
    """Residual basic block with optional PCAR second stage and AFF merge.

    With both flags off this is a standard two-conv basic block (conv-BN-ReLU,
    conv-BN, projected shortcut, sum, ReLU). ``use_pcar`` swaps the second
    convolution for a PCAR module; ``use_aff`` swaps the shortcut sum for an
    attentional fusion gate.
    """

    def __init__(self, config: BlockConfig):
        super().__init__()
        self.config = config
        cin, cout, stride = config.in_channels, config.out_channels, config.stride
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        if config.use_pcar:
            self.second = PCAR(cout)
        else:
            self.second = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                nn.BatchNorm2d(cout),
            )
        else:
            self.shortcut = nn.Identity()
        self.fuse = AFF(cout) if config.use_aff else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected {self.config.in_channels} input channels, got {x.shape[1]}"
            )
        identity = self.shortcut(x)
        h = self.bn2(self.second(F.relu(self.bn1(self.conv1(x)))))
        merged = self.fuse(h, identity) if self.fuse is not None else h + identity
        return F.relu(merged)
