"""Canonical named-tensor archive used for weights and checkpoints.

Layout of an archive file::

    8 bytes   magic b"PFSEGv1\\n"
    8 bytes   manifest length (little-endian uint64)
    N bytes   manifest JSON (utf-8, sorted keys, compact separators)
    ...       raw tensor data, C-contiguous little-endian, concatenated in
              manifest order

The manifest lists every tensor as ``{"name", "dtype", "shape"}`` sorted by
name, plus a free-form ``meta`` object. Because the byte layout is fully
canonical, save -> load -> save round-trips bit-exactly and the SHA-256 of the
file doubles as a content digest.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .exceptions import WeightLoadError

MAGIC = b"PFSEGv1\n"


def _canonical_bytes(tensors: dict[str, np.ndarray], meta: dict | None) -> bytes:
    entries = []
    blobs = []
    for name in sorted(tensors):
        # note: np.ascontiguousarray would promote 0-d arrays to 1-d, so only
        # copy when the layout actually needs it
        arr = np.asarray(tensors[name])
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    manifest = json.dumps(
        {"meta": meta if meta is not None else {}, "tensors": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    header = MAGIC + len(manifest).to_bytes(8, "little")
    return b"".join([header, manifest, *blobs])


def digest_tensors(tensors: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """SHA-256 hex digest of the canonical serialization, without touching disk."""
    return hashlib.sha256(_canonical_bytes(tensors, meta)).hexdigest()


def save_tensor_archive(
    path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None
) -> str:
    """Write ``tensors`` (+ JSON-serializable ``meta``) to ``path``; returns the digest."""
    data = _canonical_bytes(tensors, meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_tensor_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read an archive; returns ``(tensors, meta)``.

    Raises:
        WeightLoadError: if the file is absent, truncated, or not an archive.
    """
    path = Path(path)
    if not path.is_file():
        raise WeightLoadError(f"weight archive not found: {path}")
    data = path.read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise WeightLoadError(f"not a tensor archive (bad magic): {path}")
    manifest_len = int.from_bytes(data[8:16], "little")
    try:
        manifest = json.loads(data[16 : 16 + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightLoadError(f"corrupt manifest in {path}: {exc}") from exc
    tensors: dict[str, np.ndarray] = {}
    offset = 16 + manifest_len
    for entry in manifest["tensors"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(data):
            raise WeightLoadError(f"truncated archive: {path} (tensor {entry['name']})")
        tensors[entry["name"]] = np.frombuffer(
            data, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=offset
        ).reshape(shape).copy()
        offset += nbytes
    return tensors, manifest["meta"]


def archive_digest(path: str | Path) -> str:
    """SHA-256 hex digest of the archive file bytes."""
    path = Path(path)
    if not path.is_file():
        raise WeightLoadError(f"weight archive not found: {path}")
    return hashlib.sha256(path.read_bytes()).hexdigest()


def module_state_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    """Copy a module's state dict (parameters and buffers) to numpy arrays."""
    return {
        name: tensor.detach().cpu().numpy().copy()
        for name, tensor in module.state_dict().items()
    }


def module_digest(module: torch.nn.Module) -> str:
    """SHA-256 digest of a module's current state dict."""
    return digest_tensors(module_state_arrays(module))


def validate_manifest(
    tensors: dict[str, np.ndarray], expected: dict[str, tuple[str, tuple[int, ...]]]
) -> None:
    """Check that ``tensors`` exactly matches an expected layer manifest.

    ``expected`` maps layer name to ``(dtype_str, shape)``. Raises
    WeightLoadError naming the first mismatching layer (names walked in
    sorted order).
    """
    for name in sorted(set(expected) | set(tensors)):
        if name not in tensors:
            raise WeightLoadError(f"manifest mismatch: missing layer '{name}'")
        if name not in expected:
            raise WeightLoadError(f"manifest mismatch: unexpected layer '{name}'")
        dtype_str, shape = expected[name]
        arr = tensors[name]
        if arr.dtype.str != dtype_str or tuple(arr.shape) != tuple(shape):
            raise WeightLoadError(
                f"manifest mismatch at layer '{name}': expected {dtype_str}{tuple(shape)}, "
                f"found {arr.dtype.str}{tuple(arr.shape)}"
            )
