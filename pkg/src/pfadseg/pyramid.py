"""Three-level feature pyramid shared by the teacher and student networks."""

from __future__ import annotations

from typing import NamedTuple

from torch import Tensor

#: spatial stride of each pyramid level relative to the network input
PYRAMID_STRIDES = (4, 8, 16)
#: unscaled channel widths of the three levels
PYRAMID_CHANNELS = (64, 128, 256)


class FeaturePyramid(NamedTuple):
    """Ordered feature maps at strides 4, 8 and 16 (shallow to deep)."""

    level1: Tensor
    level2: Tensor
    level3: Tensor

    @property
    def channels(self) -> tuple[int, int, int]:
        return tuple(t.shape[1] for t in self)

    @property
    def spatial_sizes(self) -> tuple[tuple[int, int], ...]:
        return tuple(tuple(t.shape[-2:]) for t in self)

    def validate_matches(self, other: "FeaturePyramid") -> None:
        """Hard error if the two pyramids are not shape-compatible level by level."""
        for i, (a, b) in enumerate(zip(self, other), start=1):
            if a.shape != b.shape:
                raise ValueError(
                    f"pyramid mismatch at level {i}: {tuple(a.shape)} vs {tuple(b.shape)}"
                )


def scaled_channels(base: tuple[int, ...], channel_scale: float) -> tuple[int, ...]:
    """Apply a width multiplier, clamped to at least one channel per level."""
    if channel_scale <= 0:
        raise ValueError(f"channel_scale must be positive, got {channel_scale}")
    return tuple(max(int(round(c * channel_scale)), 1) for c in base)
