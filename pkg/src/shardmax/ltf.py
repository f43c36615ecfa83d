"""LTF: a minimal little-endian binary tensor container.

Layout:
    magic   4 bytes  b"LTF1"
    dtype   u8       1 = float32, 2 = float64
    ndim    u8
    pad     u16      reserved, must be zero
    dims    ndim x u64 little-endian
    data    row-major little-endian scalars

Round trips are bit-exact. A tensor with a zero extent writes a header-only
file and reads back with its shape intact.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import DataError

MAGIC = b"LTF1"
_CODE_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_KIND_TO_CODE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class LtfError(DataError):
    """Malformed LTF file."""


class LtfBadMagic(LtfError):
    pass


class LtfTruncated(LtfError):
    pass


class LtfDtypeError(LtfError):
    pass


def write_ltf(path, tensor: np.ndarray) -> None:
    arr = np.ascontiguousarray(tensor)
    code = _KIND_TO_CODE.get(np.dtype(arr.dtype.newbyteorder("=")))
    if code is None:
        raise LtfDtypeError(f"LTF stores float32/float64 tensors, got dtype {arr.dtype}")
    if arr.ndim > 255:
        raise LtfError("too many dimensions for LTF header")
    header = MAGIC + struct.pack("<BBH", code, arr.ndim, 0)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = arr.astype(_CODE_TO_DTYPE[code], copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_ltf(path, expected_dtype=None) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise LtfTruncated(f"{path}: file shorter than the fixed header")
    if blob[:4] != MAGIC:
        raise LtfBadMagic(f"{path}: bad magic {blob[:4]!r}")
    code, ndim, pad = struct.unpack("<BBH", blob[4:8])
    if pad != 0:
        raise LtfError(f"{path}: reserved header field is nonzero")
    dtype = _CODE_TO_DTYPE.get(code)
    if dtype is None:
        raise LtfDtypeError(f"{path}: unknown dtype code {code}")
    if expected_dtype is not None and np.dtype(expected_dtype) != dtype.newbyteorder("="):
        raise LtfDtypeError(
            f"{path}: file holds {dtype.newbyteorder('=')}, caller expected {np.dtype(expected_dtype)}"
        )
    dims_end = 8 + 8 * ndim
    if len(blob) < dims_end:
        raise LtfTruncated(f"{path}: header truncated in the dims block")
    dims = struct.unpack(f"<{ndim}Q", blob[8:dims_end])
    count = 1
    for d in dims:
        count *= d
    expected_bytes = count * dtype.itemsize
    payload = blob[dims_end:]
    if len(payload) != expected_bytes:
        raise LtfTruncated(
            f"{path}: payload holds {len(payload)} bytes, header promises {expected_bytes}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save_tensor_dir(dirpath, tensors: dict, extra: dict | None = None) -> None:
    """Write one .ltf per named tensor plus a manifest.json naming them."""
    os.makedirs(dirpath, exist_ok=True)
    entries = {}
    for name, arr in tensors.items():
        fname = name.replace("/", "_") + ".ltf"
        write_ltf(os.path.join(dirpath, fname), arr)
        entries[name] = {"file": fname, "shape": list(arr.shape), "dtype": str(arr.dtype)}
    manifest = {"tensors": entries}
    if extra:
        manifest.update(extra)
    with open(os.path.join(dirpath, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_tensor_dir(dirpath) -> tuple[dict, dict]:
    """Inverse of save_tensor_dir; returns (tensors, manifest)."""
    manifest_path = os.path.join(dirpath, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise DataError(f"{dirpath}: no manifest.json")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    tensors = {}
    for name, entry in manifest["tensors"].items():
        tensors[name] = read_ltf(os.path.join(dirpath, entry["file"]))
    return tensors, manifest
