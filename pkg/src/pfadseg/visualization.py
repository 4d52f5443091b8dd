"""Heatmap overlays and probability-map persistence.

Probability maps are saved twice: a 16-bit grayscale PNG for quick viewing
(values round(p * 65535)) and a ``.npy`` array that keeps the float values
lossless for metric computation.
"""

from __future__ import annotations

import numpy as np
from matplotlib import colormaps
from PIL import Image

HEATMAP_COLORMAP = "jet"
HEATMAP_ALPHA = 0.5


def render_heatmap(image: np.ndarray, prob: np.ndarray, alpha: float = HEATMAP_ALPHA) -> np.ndarray:
    """Blend a color-mapped probability map over an image at ``alpha`` opacity.

    Returns float RGB in [0, 1], same height/width as the inputs.
    """
    image = np.asarray(image, dtype=np.float64)
    prob = np.asarray(prob, dtype=np.float64)
    if image.shape[:2] != prob.shape:
        raise ValueError(f"image {image.shape[:2]} vs map {prob.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    colored = colormaps[HEATMAP_COLORMAP](np.clip(prob, 0.0, 1.0))[..., :3]
    if image.ndim == 2:
        image = image[..., None]
    return (1.0 - alpha) * np.clip(image, 0.0, 1.0) + alpha * colored


def save_heatmap(path, image: np.ndarray, prob: np.ndarray, alpha: float = HEATMAP_ALPHA):
    overlay = render_heatmap(image, prob, alpha)
    Image.fromarray((overlay * 255.0).round().astype(np.uint8)).save(path)


def save_prob_png(path, prob: np.ndarray):
    """Write a probability map as a 16-bit grayscale PNG."""
    arr = np.round(np.clip(np.asarray(prob, dtype=np.float64), 0.0, 1.0) * 65535.0)
    Image.fromarray(arr.astype(np.uint16)).save(path)


def load_prob_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64)
    return (arr / 65535.0).astype(np.float32)


def save_prob_array(path, prob: np.ndarray):
    """Lossless container for a probability map (plain .npy)."""
    np.save(path, np.asarray(prob, dtype=np.float32))


def load_prob_array(path) -> np.ndarray:
    arr = np.load(path)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a 2-D map, got shape {arr.shape}")
    return arr.astype(np.float32)
