"""Shared fixtures: deterministic torch settings and a miniature dataset tree."""

import numpy as np
import pytest
import torch

from pfadseg.data import save_image

torch.set_num_threads(1)


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)


def build_mini_dataset(root, categories=("widget",), image_size=64, n_train=3, n_test=2):
    """MVTec-style tree with one defect type per category; returns the root.

    Also writes a parallel ``perfect_maps/`` tree whose .npy maps equal the
    ground truth exactly (zeros for good images).
    """
    rng = np.random.default_rng(91)
    maps_root = root / "perfect_maps"
    for cat in categories:
        base = root / "data" / cat
        (base / "train" / "good").mkdir(parents=True)
        (base / "test" / "good").mkdir(parents=True)
        (base / "test" / "hole").mkdir(parents=True)
        (base / "ground_truth" / "hole").mkdir(parents=True)
        (maps_root / cat / "good").mkdir(parents=True)
        (maps_root / cat / "hole").mkdir(parents=True)

        def clean():
            return np.clip(0.5 + 0.08 * rng.standard_normal((image_size, image_size, 3)), 0, 1)

        for i in range(n_train):
            save_image(base / "train" / "good" / f"{i:03d}.png", clean())
        for i in range(n_test):
            save_image(base / "test" / "good" / f"{i:03d}.png", clean())
            np.save(
                maps_root / cat / "good" / f"{i:03d}.npy",
                np.zeros((image_size, image_size), dtype=np.float32),
            )
        for i in range(n_test):
            img = clean()
            mask = np.zeros((image_size, image_size))
            r0, c0 = 10 + 6 * i, 14 + 4 * i
            mask[r0 : r0 + 12, c0 : c0 + 16] = 1
            img[mask.astype(bool)] *= 0.25
            save_image(base / "test" / "hole" / f"{i:03d}.png", img)
            save_image(base / "ground_truth" / "hole" / f"{i:03d}_mask.png", mask)
            np.save(maps_root / cat / "hole" / f"{i:03d}.npy", mask.astype(np.float32))
    return root / "data"


@pytest.fixture
def mini_dataset(tmp_path):
    """(data_root, textures_dir, perfect_maps_dir) for a tiny two-defect tree."""
    data_root = build_mini_dataset(tmp_path)
    textures = tmp_path / "textures"
    textures.mkdir()
    rng = np.random.default_rng(17)
    for i in range(3):
        save_image(textures / f"tex{i}.png", rng.random((48, 48, 3)))
    return data_root, textures, tmp_path / "perfect_maps"
