"""Denoising student: PA-enhanced encoder plus a reversed, upsampling decoder.

The encoder mirrors a four-stage ResNet18 built from PA residual blocks (the
7x7 stem and its max pooling are folded into the first stage). The decoder
runs the same block plan in reverse, trading every downsampling step for
bilinear x2 upsampling, and exposes the three outputs whose shapes match the
teacher pyramid.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .blocks import BlockConfig, PAResidualBlock
from .pyramid import FeaturePyramid, scaled_channels
from .teacher import INPUT_MEAN, INPUT_STD

ENCODER_CHANNELS = (64, 128, 256, 512)


@dataclass(frozen=True)
class StudentConfig:
    """Width and ablation plan for the student network."""

    channel_scale: float = 1.0
    use_aff: bool = True
    use_pcar: bool = True

    @property
    def encoder_channels(self) -> tuple[int, int, int, int]:
        return scaled_channels(ENCODER_CHANNELS, self.channel_scale)

    @property
    def pyramid_channels(self) -> tuple[int, int, int]:
        return self.encoder_channels[:3]


class StudentNet(nn.Module):
    """Encoder over strides 4/8/16/32, decoder back up through 16/8/4.

    ``forward`` returns the decoder taps shape-matched to the teacher's
    (level1, level2, level3); the deepest tap is produced first during
    decoding and the stride-4 tap is the decoder's final output, so every
    decoder parameter sits on the loss path.
    """

    def __init__(self, config: StudentConfig | None = None):
        super().__init__()
        self.config = config or StudentConfig()
        c1, c2, c3, c4 = self.config.encoder_channels
        flags = {"use_aff": self.config.use_aff, "use_pcar": self.config.use_pcar}

        def stage(cin, cout, stride):
            return nn.Sequential(
                PAResidualBlock(BlockConfig(cin, cout, stride, **flags)),
                PAResidualBlock(BlockConfig(cout, cout, 1, **flags)),
            )

        self.stem = nn.Sequential(
            nn.Conv2d(3, c1, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(c1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.encoder = nn.ModuleList([
            stage(c1, c1, 1),   # stride 4
            stage(c1, c2, 2),   # stride 8
            stage(c2, c3, 2),   # stride 16
            stage(c3, c4, 2),   # stride 32
        ])
        self.decoder = nn.ModuleList([
            stage(c4, c3, 1),   # after upsample: stride 16
            stage(c3, c2, 1),   # stride 8
            stage(c2, c1, 1),   # stride 4
            stage(c1, c1, 1),   # stride 4, final tap
        ])
        self.register_buffer("input_mean", torch.tensor(INPUT_MEAN).view(1, 3, 1, 1))
        self.register_buffer("input_std", torch.tensor(INPUT_STD).view(1, 3, 1, 1))

    @staticmethod
    def _up(x: Tensor) -> Tensor:
        return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)

    def forward(self, x: Tensor) -> FeaturePyramid:
        """Input (B, 3, H, W) in [0, 1] with H, W divisible by 32."""
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input dims must be divisible by 32, got {h}x{w}")
        x = (x - self.input_mean) / self.input_std
        x = self.stem(x)
        for enc_stage in self.encoder:
            x = enc_stage(x)
        d3 = self.decoder[0](self._up(x))
        d2 = self.decoder[1](self._up(d3))
        d1 = self.decoder[2](self._up(d2))
        d1 = self.decoder[3](d1)
        return FeaturePyramid(d1, d2, d3)
