"""Flat binary container for named nd-arrays (checkpoints, cached tensors).

Layout, all integers little-endian:

    magic   4 bytes  b"DCAT"
    u32     format version (currently 1)
    u32     entry count
    entry*  u16 name length, UTF-8 name bytes,
            u8 dtype code (0 = float32, 1 = float64, 2 = uint8),
            u8 rank, u64 extent per axis, raw values little-endian,
            row-major

Entries are written in the order given, so a dict with deterministic
insertion order round-trips byte-identically.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"DCAT"
VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("u1"): 2,
}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}


class ArchiveError(ValueError):
    """Raised for malformed archives: bad magic, version, or truncation."""


def _dtype_code(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    code = _DTYPE_CODES.get(np.dtype(dt))
    if code is None:
        raise TypeError(f"archive supports float32/float64/uint8, got {arr.dtype}")
    return code


def save_archive(path, entries: dict) -> None:
    """Write `entries` (name -> ndarray) to `path` in insertion order."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(entries))
    for name, arr in entries.items():
        arr = np.ascontiguousarray(arr)
        code = _dtype_code(arr)
        name_bytes = name.encode("utf-8")
        if len(name_bytes) > 0xFFFF:
            raise ValueError(f"entry name too long: {len(name_bytes)} bytes")
        blob += struct.pack("<H", len(name_bytes))
        blob += name_bytes
        blob += struct.pack("<BB", code, arr.ndim)
        blob += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        blob += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ArchiveError(
                f"archive truncated while reading {what}: "
                f"need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def load_archive(path) -> dict:
    """Read an archive back into an ordered name -> ndarray dict."""
    with open(path, "rb") as fh:
        data = fh.read()
    cur = _Cursor(data)
    magic = cur.take(4, "magic")
    if magic != MAGIC:
        raise ArchiveError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, count = struct.unpack("<II", cur.take(8, "header"))
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version}, expected {VERSION}")
    entries: dict = {}
    for i in range(count):
        (name_len,) = struct.unpack("<H", cur.take(2, f"entry {i} name length"))
        name = cur.take(name_len, f"entry {i} name").decode("utf-8")
        code, rank = struct.unpack("<BB", cur.take(2, f"entry '{name}' dtype/rank"))
        if code not in _CODE_DTYPES:
            raise ArchiveError(f"entry '{name}' has unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}Q", cur.take(8 * rank, f"entry '{name}' shape"))
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        raw = cur.take(nbytes, f"entry '{name}' values")
        entries[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    if cur.pos != len(data):
        raise ArchiveError(f"{len(data) - cur.pos} trailing bytes after last entry")
    return entries
