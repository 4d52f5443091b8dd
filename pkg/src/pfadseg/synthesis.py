"""Synthetic anomaly generation.

Pseudo-anomalous training images are produced by binarizing 2D Perlin noise
into a blob mask and alpha-blending an external texture into a normal image
inside that mask. All randomness comes from an explicit ``numpy.random.Generator``
so every sample is reproducible from a seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError


@dataclass(frozen=True)
class SynthesisConfig:
    """Knobs for mask generation and blending.

    Attributes:
        beta_range: interval the blend transparency is drawn from, inside [0, 1].
        perlin_scale_choices: lattice frequencies (powers of two) the noise
            scale is drawn from, independently per axis.
        binarize_threshold: cut applied to the [0, 1]-rescaled noise.
        rng_seed: default seed for convenience constructors.
        max_mask_attempts: resample budget before giving up on a non-empty mask.
    """

    beta_range: tuple[float, float] = (0.15, 1.0)
    perlin_scale_choices: tuple[int, ...] = (2, 4, 8, 16, 32)
    binarize_threshold: float = 0.5
    rng_seed: int = 0
    max_mask_attempts: int = 10

    def __post_init__(self):
        lo, hi = self.beta_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ConfigurationError(f"beta_range must be inside [0, 1], got {self.beta_range}")
        if not self.perlin_scale_choices or any(s < 1 for s in self.perlin_scale_choices):
            raise ConfigurationError("perlin_scale_choices must be positive integers")
        if math.isnan(self.binarize_threshold):
            raise ConfigurationError("binarize_threshold must not be NaN")


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _lerp(a: np.ndarray, b: np.ndarray, t: np.ndarray) -> np.ndarray:
    return a + t * (b - a)


def perlin_noise_2d(
    height: int, width: int, freq_y: int, freq_x: int, rng: np.random.Generator
) -> np.ndarray:
    """Classic single-octave gradient noise on a ``freq_y`` x ``freq_x`` lattice.

    Returns a float64 array of shape (height, width); values are roughly in
    [-0.7, 0.7] and are rescaled by callers as needed.
    """
    angles = rng.uniform(0.0, 2.0 * np.pi, size=(freq_y + 1, freq_x + 1))
    grad_y = np.sin(angles)
    grad_x = np.cos(angles)

    ys = np.linspace(0.0, freq_y, height, endpoint=False)
    xs = np.linspace(0.0, freq_x, width, endpoint=False)
    yi = ys.astype(np.int64)
    xi = xs.astype(np.int64)
    yf, xf = np.meshgrid(ys - yi, xs - xi, indexing="ij")
    yi, xi = np.meshgrid(yi, xi, indexing="ij")

    def corner(dy: int, dx: int) -> np.ndarray:
        gy = grad_y[yi + dy, xi + dx]
        gx = grad_x[yi + dy, xi + dx]
        return gy * (yf - dy) + gx * (xf - dx)

    u = _fade(xf)
    v = _fade(yf)
    top = _lerp(corner(0, 0), corner(0, 1), u)
    bottom = _lerp(corner(1, 0), corner(1, 1), u)
    return _lerp(top, bottom, v)


def generate_perlin_mask(
    height: int, width: int, config: SynthesisConfig, rng: np.random.Generator
) -> np.ndarray:
    """Binarized Perlin-noise blob mask.

    The noise is rescaled to [0, 1] per image before thresholding, so coverage
    depends on the threshold, not the noise amplitude. May legitimately return
    an all-zero mask (e.g. for thresholds >= 1); callers that need a non-empty
    mask resample, see :func:`sample_training_pair`.

    Returns:
        uint8 array of shape (height, width) with values in {0, 1}.
    """
    if height < 8 or width < 8:
        raise ValueError(f"mask dimensions must be >= 8, got {height}x{width}")
    freq_y = int(rng.choice(np.asarray(config.perlin_scale_choices, dtype=np.int64)))
    freq_x = int(rng.choice(np.asarray(config.perlin_scale_choices, dtype=np.int64)))
    noise = perlin_noise_2d(height, width, freq_y, freq_x, rng)
    span = noise.max() - noise.min()
    if span == 0.0:
        return np.zeros((height, width), dtype=np.uint8)
    noise = (noise - noise.min()) / span
    return (noise > config.binarize_threshold).astype(np.uint8)


def blend_anomaly(
    normal: np.ndarray, texture: np.ndarray, mask: np.ndarray, beta: float
) -> np.ndarray:
    """Blend ``texture`` into ``normal`` inside ``mask`` with transparency ``beta``.

    Off the mask support the output equals ``normal`` exactly; on the support
    it is the convex combination ``beta * texture + (1 - beta) * normal``.
    """
    if normal.shape != texture.shape:
        raise ValueError(f"image shapes differ: {normal.shape} vs {texture.shape}")
    if mask.shape != normal.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {normal.shape[:2]}")
    if not (0.0 <= beta <= 1.0):
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    k = mask.astype(normal.dtype, copy=False)
    if normal.ndim == 3:
        k = k[..., None]
    return beta * (k * texture) + (1.0 - beta) * (k * normal) + (1.0 - k) * normal


def sample_training_pair(
    normal: np.ndarray,
    texture_source,
    config: SynthesisConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw one (pseudo-anomalous image, mask) pair for training.

    Draws, in order: a texture index, a transparency beta, then Perlin masks
    until one is non-empty (at most ``config.max_mask_attempts``). The fixed
    draw order makes pairs reproducible from the generator state.

    Args:
        normal: H x W x 3 float image in [0, 1].
        texture_source: anything with ``__len__`` and ``load(index, (h, w))``
            returning a float image, e.g. :class:`pfadseg.data.TextureStore`.

    Returns:
        (anomalous image, uint8 mask), both matching ``normal``'s spatial dims.
    """
    if len(texture_source) == 0:
        raise ConfigurationError("texture source is empty")
    height, width = normal.shape[:2]
    index = int(rng.integers(len(texture_source)))
    texture = texture_source.load(index, (height, width))
    beta = float(rng.uniform(*config.beta_range))
    for _ in range(config.max_mask_attempts):
        mask = generate_perlin_mask(height, width, config, rng)
        if mask.any():
            return blend_anomaly(normal, texture, mask, beta), mask
    raise RuntimeError(
        f"no non-empty mask after {config.max_mask_attempts} attempts; "
        "check binarize_threshold"
    )
