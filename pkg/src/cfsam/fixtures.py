"""Portable binary tensor fixtures and weight-bundle serialization.

Single-tensor format (normative byte layout, little-endian throughout):

    magic   4 bytes  b"CFST"
    version u8       1
    dtype   u8       0 = float32, 1 = float64
    rank    u8
    dims    rank × u32
    data    product(dims) scalars, raw little-endian

Pyramids and weight bundles are directories holding one blob per tensor
plus a text manifest (``name<TAB>filename`` per line) fixing order and
naming.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"CFST"
VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

MANIFEST_NAME = "manifest.txt"


class FixtureFormatError(ValueError):
    """Malformed fixture file: bad magic, version, or truncated payload."""


def write_tensor(path, array) -> None:
    arr = np.asarray(getattr(array, "data", array))
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)  # keep 0-d rank intact
    if arr.dtype not in _CODE_FOR:
        raise FixtureFormatError(f"unsupported dtype {arr.dtype}")
    header = struct.pack("<4sBBB", MAGIC, VERSION, _CODE_FOR[arr.dtype], arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    Path(path).write_bytes(header + dims + payload)


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 7:
        raise FixtureFormatError(f"{path}: truncated header")
    magic, version, dtype_code, rank = struct.unpack_from("<4sBBB", raw)
    if magic != MAGIC:
        raise FixtureFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FixtureFormatError(f"{path}: unsupported version {version}")
    if dtype_code not in _DTYPE_CODES:
        raise FixtureFormatError(f"{path}: unknown dtype code {dtype_code}")
    dims_end = 7 + 4 * rank
    if len(raw) < dims_end:
        raise FixtureFormatError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", raw, 7)
    dtype = _DTYPE_CODES[dtype_code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    expected = dims_end + count * dtype.itemsize
    if len(raw) != expected:
        raise FixtureFormatError(
            f"{path}: payload length {len(raw) - dims_end} != expected {expected - dims_end}"
        )
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=dims_end)
    return data.reshape(dims).astype(dtype.newbyteorder("="))


def write_bundle(directory, named_arrays) -> None:
    """Write an ordered set of named tensors as manifest + blobs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (name, arr) in enumerate(named_arrays):
        fname = f"{i:04d}.cfst"
        write_tensor(directory / fname, arr)
        lines.append(f"{name}\t{fname}")
    (directory / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def read_bundle(directory) -> list[tuple[str, np.ndarray]]:
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if not manifest.is_file():
        raise FixtureFormatError(f"{directory}: missing {MANIFEST_NAME}")
    out = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        try:
            name, fname = line.split("\t")
        except ValueError as exc:
            raise FixtureFormatError(f"{directory}: bad manifest line {line!r}") from exc
        out.append((name, read_tensor(directory / fname)))
    return out
