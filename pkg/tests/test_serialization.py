"""Canonical tensor archive: byte-stable round trips and corruption handling."""

import hashlib

import numpy as np
import pytest
import torch
from torch import nn

from pfadseg.exceptions import WeightLoadError
from pfadseg.serialization import (
    MAGIC,
    archive_digest,
    digest_tensors,
    load_tensor_archive,
    module_digest,
    module_state_arrays,
    save_tensor_archive,
    validate_manifest,
)


def _sample_tensors():
    rng = np.random.default_rng(0)
    return {
        "conv.weight": rng.standard_normal((4, 3, 3, 3)).astype(np.float32),
        "bn.running_mean": rng.standard_normal(4).astype(np.float64),
        "bn.num_batches_tracked": np.array(17, dtype=np.int64),  # 0-d
        "mask": (rng.random((5, 5)) > 0.5).astype(np.uint8),
    }


class TestRoundTrip:
    def test_bitwise_identity(self, tmp_path):
        tensors = _sample_tensors()
        path = tmp_path / "weights.pfseg"
        save_tensor_archive(path, tensors, {"note": "x"})
        loaded, meta = load_tensor_archive(path)
        assert meta == {"note": "x"}
        assert set(loaded) == set(tensors)
        for name in tensors:
            assert loaded[name].dtype == tensors[name].dtype, name
            assert loaded[name].shape == tensors[name].shape, name
            assert np.array_equal(loaded[name], tensors[name]), name

    def test_save_load_save_is_byte_stable(self, tmp_path):
        p1, p2 = tmp_path / "a.pfseg", tmp_path / "b.pfseg"
        d1 = save_tensor_archive(p1, _sample_tensors(), {"k": [1, 2]})
        loaded, meta = load_tensor_archive(p1)
        d2 = save_tensor_archive(p2, loaded, meta)
        assert d1 == d2
        assert p1.read_bytes() == p2.read_bytes()

    def test_digest_matches_file_hash(self, tmp_path):
        path = tmp_path / "w.pfseg"
        digest = save_tensor_archive(path, _sample_tensors())
        assert digest == hashlib.sha256(path.read_bytes()).hexdigest()
        assert digest == archive_digest(path)
        assert digest == digest_tensors(_sample_tensors())

    def test_insertion_order_does_not_matter(self):
        tensors = _sample_tensors()
        reordered = dict(reversed(list(tensors.items())))
        assert digest_tensors(tensors) == digest_tensors(reordered)

    def test_content_changes_digest(self):
        a = _sample_tensors()
        b = _sample_tensors()
        b["conv.weight"] = b["conv.weight"] + 1e-6
        assert digest_tensors(a) != digest_tensors(b)
        assert digest_tensors(a, {"m": 1}) != digest_tensors(a, {"m": 2})

    def test_non_contiguous_and_zero_dim_arrays(self, tmp_path):
        base = np.arange(24, dtype=np.float32).reshape(4, 6)
        tensors = {"t": base.T, "scalar": np.float64(3.5) * np.ones(())}
        path = tmp_path / "w.pfseg"
        save_tensor_archive(path, tensors)
        loaded, _ = load_tensor_archive(path)
        assert np.array_equal(loaded["t"], base.T)
        assert loaded["t"].shape == (6, 4)
        assert loaded["scalar"].shape == ()

    def test_empty_archive(self, tmp_path):
        path = tmp_path / "empty.pfseg"
        save_tensor_archive(path, {})
        loaded, meta = load_tensor_archive(path)
        assert loaded == {} and meta == {}


class TestCorruption:
    def test_missing_file(self, tmp_path):
        with pytest.raises(WeightLoadError, match="not found"):
            load_tensor_archive(tmp_path / "absent.pfseg")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.pfseg"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(WeightLoadError, match="bad magic"):
            load_tensor_archive(path)

    def test_too_short(self, tmp_path):
        path = tmp_path / "short.pfseg"
        path.write_bytes(MAGIC[:4])
        with pytest.raises(WeightLoadError, match="bad magic"):
            load_tensor_archive(path)

    def test_truncated_tensor_data(self, tmp_path):
        path = tmp_path / "trunc.pfseg"
        save_tensor_archive(path, _sample_tensors())
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(WeightLoadError, match="truncated"):
            load_tensor_archive(path)

    def test_corrupt_manifest(self, tmp_path):
        path = tmp_path / "mangled.pfseg"
        save_tensor_archive(path, {"a": np.zeros(2, dtype=np.float32)})
        data = bytearray(path.read_bytes())
        data[20] ^= 0xFF  # flip a byte inside the manifest JSON
        path.write_bytes(bytes(data))
        with pytest.raises(WeightLoadError):
            load_tensor_archive(path)


class TestModuleHelpers:
    def _module(self):
        torch.manual_seed(0)
        return nn.Sequential(nn.Conv2d(2, 3, 3), nn.BatchNorm2d(3))

    def test_state_arrays_cover_params_and_buffers(self):
        mod = self._module()
        arrays = module_state_arrays(mod)
        assert set(arrays) == set(mod.state_dict())
        assert arrays["1.num_batches_tracked"].shape == ()

    def test_module_digest_tracks_state(self):
        mod = self._module()
        before = module_digest(mod)
        assert before == module_digest(mod)
        with torch.no_grad():
            mod[0].weight += 1.0
        assert module_digest(mod) != before

    def test_module_round_trip(self, tmp_path):
        mod = self._module()
        path = tmp_path / "mod.pfseg"
        save_tensor_archive(path, module_state_arrays(mod))
        loaded, _ = load_tensor_archive(path)
        fresh = self._module()
        with torch.no_grad():
            fresh[0].weight += 5.0
        fresh.load_state_dict({k: torch.from_numpy(v) for k, v in loaded.items()})
        assert module_digest(fresh) == module_digest(mod)


class TestValidateManifest:
    def test_accepts_exact_match(self):
        tensors = {"w": np.zeros((2, 3), dtype=np.float32)}
        validate_manifest(tensors, {"w": ("<f4", (2, 3))})

    def test_missing_layer(self):
        with pytest.raises(WeightLoadError, match="missing layer 'w'"):
            validate_manifest({}, {"w": ("<f4", (2,))})

    def test_unexpected_layer(self):
        tensors = {"extra": np.zeros(2, dtype=np.float32)}
        with pytest.raises(WeightLoadError, match="unexpected layer 'extra'"):
            validate_manifest(tensors, {})

    def test_shape_mismatch_names_layer(self):
        tensors = {"w": np.zeros((2, 4), dtype=np.float32)}
        with pytest.raises(WeightLoadError, match="mismatch at layer 'w'"):
            validate_manifest(tensors, {"w": ("<f4", (2, 3))})

    def test_dtype_mismatch(self):
        tensors = {"w": np.zeros(2, dtype=np.float64)}
        with pytest.raises(WeightLoadError, match="'w'"):
            validate_manifest(tensors, {"w": ("<f4", (2,))})
