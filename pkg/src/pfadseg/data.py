"""Image stores and dataset-layout ingestion.

The on-disk layout follows the common industrial-inspection convention:

    root/<category>/train/good/*.png
    root/<category>/test/<defect>/*.png          ("good" = normal test images)
    root/<category>/ground_truth/<defect>/<stem>_mask.png

Stores read flat directories in lexicographic filename order so that seeded
sampling reproduces across machines.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from .exceptions import DatasetValidationError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def _listed_images(directory: Path) -> list[Path]:
    return sorted(
        p for p in directory.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    )


def load_image(path, size: Optional[tuple[int, int]] = None) -> np.ndarray:
    """Decode an image to float32 RGB in [0, 1], shape (H, W, 3).

    ``size`` is (height, width); resizing is bilinear.
    """
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None:
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, SyntaxError) as exc:
        raise DatasetValidationError(f"cannot decode image {path}: {exc}") from exc
    return arr


def load_mask(path, size: Optional[tuple[int, int]] = None) -> np.ndarray:
    """Decode a mask image to uint8 {0, 1}, shape (H, W). Nearest resize."""
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if size is not None:
                im = im.resize((size[1], size[0]), Image.NEAREST)
            arr = np.asarray(im)
    except (OSError, SyntaxError) as exc:
        raise DatasetValidationError(f"cannot decode mask {path}: {exc}") from exc
    return (arr > 0).astype(np.uint8)


def save_image(path, arr: np.ndarray):
    """Write a float [0, 1] (H, W, 3) or (H, W) array as an 8-bit image."""
    a = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((a * 255.0).round().astype(np.uint8)).save(path)


class ImageStore:
    """Ordered collection of images, backed by files or in-memory arrays."""

    def __init__(self, paths: Sequence = (), arrays: Sequence[np.ndarray] = ()):
        if paths and arrays:
            raise ValueError("provide paths or arrays, not both")
        self.paths = [Path(p) for p in paths]
        self.arrays = [np.asarray(a, dtype=np.float32) for a in arrays]

    @classmethod
    def from_directory(cls, directory) -> "ImageStore":
        directory = Path(directory)
        if not directory.is_dir():
            raise DatasetValidationError(f"not a directory: {directory}")
        return cls(paths=_listed_images(directory))

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "ImageStore":
        return cls(arrays=arrays)

    def __len__(self) -> int:
        return len(self.paths) or len(self.arrays)

    def load(self, index: int, size: Optional[tuple[int, int]] = None) -> np.ndarray:
        if self.paths:
            return load_image(self.paths[index], size)
        arr = self.arrays[index]
        if size is not None and arr.shape[:2] != tuple(size):
            im = Image.fromarray((np.clip(arr, 0, 1) * 255).round().astype(np.uint8))
            im = im.resize((size[1], size[0]), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
        return arr


class TextureStore(ImageStore):
    """Flat directory of texture images used as anomaly content."""


class NormalImageStore(ImageStore):
    """Defect-free training images of one category."""


@dataclass
class CategoryLayout:
    name: str
    train_good: list[Path]
    test: dict[str, list[Path]] = field(default_factory=dict)
    masks: dict[Path, Path] = field(default_factory=dict)  # test image -> mask

    def counts(self) -> dict:
        return {
            "train_good": len(self.train_good),
            "test": {defect: len(v) for defect, v in sorted(self.test.items())},
        }

    def iter_test(self) -> Iterator[tuple[Path, str, Optional[Path]]]:
        """Yield (image path, defect name, mask path or None) in stable order."""
        for defect in sorted(self.test):
            for path in self.test[defect]:
                yield path, defect, self.masks.get(path)


@dataclass
class DatasetLayout:
    root: Path
    categories: list[CategoryLayout]

    def category(self, name: str) -> CategoryLayout:
        for cat in self.categories:
            if cat.name == name:
                return cat
        known = ", ".join(c.name for c in self.categories)
        raise DatasetValidationError(f"unknown category {name!r}; have: {known}")

    def counts(self) -> dict:
        return {cat.name: cat.counts() for cat in self.categories}


def _check_decodes(path: Path) -> tuple[int, int]:
    """Verify the file decodes; return (height, width)."""
    try:
        with Image.open(path) as im:
            size = im.size
            im.verify()
    except (OSError, SyntaxError) as exc:
        raise DatasetValidationError(f"cannot decode image {path}: {exc}") from exc
    return size[1], size[0]


def ingest_dataset(root) -> DatasetLayout:
    """Validate a dataset directory and return its layout.

    Every anomalous test image must pair with exactly one mask named
    ``<stem>_mask.png`` under ``ground_truth/<defect>/``, with matching
    dimensions. Raises :class:`DatasetValidationError` naming the offending
    file otherwise.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetValidationError(f"dataset root does not exist: {root}")

    categories = []
    for cat_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        train_dir = cat_dir / "train" / "good"
        test_dir = cat_dir / "test"
        if not train_dir.is_dir() or not test_dir.is_dir():
            continue  # not a category directory
        train_good = _listed_images(train_dir)
        for p in train_good:
            _check_decodes(p)
        if not train_good:
            raise DatasetValidationError(f"no training images in {train_dir}")

        layout = CategoryLayout(name=cat_dir.name, train_good=train_good)
        for defect_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
            defect = defect_dir.name
            images = _listed_images(defect_dir)
            layout.test[defect] = images
            for img in images:
                h, w = _check_decodes(img)
                if defect == "good":
                    continue
                mask = cat_dir / "ground_truth" / defect / f"{img.stem}_mask.png"
                if not mask.is_file():
                    raise DatasetValidationError(f"missing ground-truth mask for {img}: {mask}")
                mh, mw = _check_decodes(mask)
                if (mh, mw) != (h, w):
                    raise DatasetValidationError(
                        f"mask {mask} is {(mh, mw)} but image {img} is {(h, w)}"
                    )
                layout.masks[img] = mask
        categories.append(layout)

    if not categories:
        raise DatasetValidationError(f"no categories found under {root}")
    return DatasetLayout(root=root, categories=categories)
