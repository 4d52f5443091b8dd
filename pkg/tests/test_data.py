"""Image loading, stores, and dataset-layout validation."""

import numpy as np
import pytest
from PIL import Image

from conftest import build_mini_dataset
from pfadseg.data import (
    ImageStore,
    NormalImageStore,
    TextureStore,
    ingest_dataset,
    load_image,
    load_mask,
    save_image,
)
from pfadseg.exceptions import DatasetValidationError


class TestLoadHelpers:
    def test_image_round_trip(self, tmp_path):
        path = tmp_path / "img.png"
        arr = np.linspace(0, 1, 12 * 10 * 3, dtype=np.float64).reshape(12, 10, 3)
        save_image(path, arr)
        loaded = load_image(path)
        assert loaded.shape == (12, 10, 3)
        assert loaded.dtype == np.float32
        assert np.abs(loaded - arr).max() <= 0.5 / 255 + 1e-6  # 8-bit quantization

    def test_image_resize(self, tmp_path):
        path = tmp_path / "img.png"
        save_image(path, np.zeros((20, 30, 3)))
        assert load_image(path, size=(8, 16)).shape == (8, 16, 3)

    def test_grayscale_promotes_to_rgb(self, tmp_path):
        path = tmp_path / "gray.png"
        Image.fromarray(np.full((6, 6), 128, dtype=np.uint8), mode="L").save(path)
        arr = load_image(path)
        assert arr.shape == (6, 6, 3)
        assert np.allclose(arr[..., 0], arr[..., 1])

    def test_mask_binarizes(self, tmp_path):
        path = tmp_path / "mask.png"
        raw = np.zeros((8, 8), dtype=np.uint8)
        raw[2:4, 2:4] = 255
        raw[5, 5] = 7  # any nonzero value counts as positive
        Image.fromarray(raw, mode="L").save(path)
        mask = load_mask(path)
        assert mask.dtype == np.uint8
        assert set(np.unique(mask)) == {0, 1}
        assert mask[2, 2] == 1 and mask[5, 5] == 1 and mask[0, 0] == 0

    def test_mask_resize_stays_binary(self, tmp_path):
        path = tmp_path / "mask.png"
        raw = np.zeros((16, 16), dtype=np.uint8)
        raw[0:8, :] = 255
        Image.fromarray(raw, mode="L").save(path)
        mask = load_mask(path, size=(4, 4))
        assert set(np.unique(mask)) <= {0, 1}
        assert mask.shape == (4, 4)

    def test_undecodable_file(self, tmp_path):
        path = tmp_path / "broken.png"
        path.write_bytes(b"this is not a png")
        with pytest.raises(DatasetValidationError, match="broken.png"):
            load_image(path)


class TestImageStore:
    def test_directory_store_sorted(self, tmp_path):
        for name in ("b.png", "a.png", "c.png", "notes.txt"):
            if name.endswith(".png"):
                save_image(tmp_path / name, np.zeros((4, 4, 3)))
            else:
                (tmp_path / name).write_text("ignored")
        store = ImageStore.from_directory(tmp_path)
        assert [p.name for p in store.paths] == ["a.png", "b.png", "c.png"]
        assert len(store) == 3
        assert store.load(0).shape == (4, 4, 3)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DatasetValidationError, match="not a directory"):
            ImageStore.from_directory(tmp_path / "absent")

    def test_array_store(self):
        arrays = [np.full((6, 6, 3), 0.25), np.full((6, 6, 3), 0.75)]
        store = ImageStore.from_arrays(arrays)
        assert len(store) == 2
        assert store.load(1).dtype == np.float32
        assert np.allclose(store.load(1), 0.75)

    def test_array_store_resizes_on_mismatch_only(self):
        arr = np.full((8, 8, 3), 0.5, dtype=np.float32)
        store = ImageStore.from_arrays([arr])
        same = store.load(0, size=(8, 8))
        assert same is arr or np.shares_memory(same, arr)
        resized = store.load(0, size=(4, 4))
        assert resized.shape == (4, 4, 3)

    def test_rejects_both_sources(self):
        with pytest.raises(ValueError, match="not both"):
            ImageStore(paths=["x.png"], arrays=[np.zeros((2, 2, 3))])

    def test_subclasses_behave_alike(self, tmp_path):
        save_image(tmp_path / "t.png", np.zeros((4, 4, 3)))
        assert len(TextureStore.from_directory(tmp_path)) == 1
        assert len(NormalImageStore.from_directory(tmp_path)) == 1


class TestIngestDataset:
    def test_counts_and_layout(self, tmp_path):
        root = build_mini_dataset(tmp_path, categories=("widget", "gasket"))
        layout = ingest_dataset(root)
        assert [c.name for c in layout.categories] == ["gasket", "widget"]
        counts = layout.counts()
        assert counts["widget"] == {"train_good": 3, "test": {"good": 2, "hole": 2}}
        cat = layout.category("widget")
        rows = list(cat.iter_test())
        assert len(rows) == 4
        assert [defect for _, defect, _ in rows] == ["good", "good", "hole", "hole"]
        assert all(mask is None for _, d, mask in rows if d == "good")
        assert all(mask is not None for _, d, mask in rows if d == "hole")

    def test_unknown_category_lookup(self, tmp_path):
        root = build_mini_dataset(tmp_path)
        with pytest.raises(DatasetValidationError, match="unknown category"):
            ingest_dataset(root).category("does-not-exist")

    def test_missing_root(self, tmp_path):
        with pytest.raises(DatasetValidationError, match="does not exist"):
            ingest_dataset(tmp_path / "nowhere")

    def test_empty_root(self, tmp_path):
        with pytest.raises(DatasetValidationError, match="no categories"):
            ingest_dataset(tmp_path)

    def test_non_category_dirs_skipped(self, tmp_path):
        root = build_mini_dataset(tmp_path)
        (root / "stray_dir").mkdir()
        layout = ingest_dataset(root)
        assert [c.name for c in layout.categories] == ["widget"]

    def test_missing_mask_named(self, tmp_path):
        root = build_mini_dataset(tmp_path)
        victim = root / "widget" / "ground_truth" / "hole" / "000_mask.png"
        victim.unlink()
        with pytest.raises(DatasetValidationError, match="missing ground-truth mask"):
            ingest_dataset(root)

    def test_mask_dimension_mismatch(self, tmp_path):
        root = build_mini_dataset(tmp_path)
        victim = root / "widget" / "ground_truth" / "hole" / "001_mask.png"
        save_image(victim, np.zeros((16, 16)))
        with pytest.raises(DatasetValidationError, match="001_mask.png"):
            ingest_dataset(root)

    def test_undecodable_train_image(self, tmp_path):
        root = build_mini_dataset(tmp_path)
        victim = root / "widget" / "train" / "good" / "002.png"
        victim.write_bytes(b"corrupted")
        with pytest.raises(DatasetValidationError, match="002.png"):
            ingest_dataset(root)

    def test_empty_train_dir(self, tmp_path):
        root = build_mini_dataset(tmp_path)
        for p in (root / "widget" / "train" / "good").iterdir():
            p.unlink()
        with pytest.raises(DatasetValidationError, match="no training images"):
            ingest_dataset(root)
