"""Binary netpbm image IO: P6 color (PPM) and P5 grayscale (PGM), maxval 255.

Images cross this boundary as uint8 arrays, [3, H, W] for color and [H, W]
for grayscale. Float images in [0, 1] are quantized with round-half-up via
`to_u8`. Header parsing accepts '#' comments and arbitrary whitespace, as the
format allows.
"""

from __future__ import annotations

import numpy as np

__all__ = ["read_ppm", "write_ppm", "read_pgm", "write_pgm", "to_u8"]


class NetpbmError(ValueError):
    """Raised for malformed netpbm files."""


def to_u8(img: np.ndarray) -> np.ndarray:
    """Quantize a float image in [0, 1] to uint8; uint8 passes through."""
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def _read_tokens(data: bytes, count: int):
    """Pull `count` whitespace-separated header tokens, skipping comments.

    Returns (tokens, offset of the byte right after the single whitespace
    character that terminates the last token).
    """
    tokens = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise NetpbmError("truncated header")
        c = data[i:i + 1]
        if c == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        else:
            start = i
            while i < len(data) and not data[i:i + 1].isspace() and data[i:i + 1] != b"#":
                i += 1
            tokens.append(data[start:i])
    if i >= len(data) or not data[i:i + 1].isspace():
        raise NetpbmError("header not terminated by whitespace")
    return tokens, i + 1


def _read_netpbm(path, magic: bytes):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, offset = _read_tokens(data, 4)
    if tokens[0] != magic:
        raise NetpbmError(f"bad magic {tokens[0]!r}, expected {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise NetpbmError(f"non-numeric header field: {exc}") from exc
    if maxval != 255:
        raise NetpbmError(f"only maxval 255 is supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    raw = data[offset:offset + need]
    if len(raw) != need:
        raise NetpbmError(f"pixel data truncated: need {need} bytes, have {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8), width, height


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into a [3, H, W] uint8 array."""
    flat, width, height = _read_netpbm(path, b"P6")
    return flat.reshape(height, width, 3).transpose(2, 0, 1).copy()


def write_ppm(path, img: np.ndarray) -> None:
    """Write a [3, H, W] uint8 (or [0,1] float) image as binary PPM."""
    arr = to_u8(img)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise NetpbmError(f"write_ppm needs a [3, H, W] image, got shape {arr.shape}")
    _, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.transpose(1, 2, 0).tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into an [H, W] uint8 array."""
    flat, width, height = _read_netpbm(path, b"P5")
    return flat.reshape(height, width).copy()


def write_pgm(path, img: np.ndarray) -> None:
    """Write an [H, W] uint8 (or [0,1] float) image as binary PGM."""
    arr = to_u8(img)
    if arr.ndim != 2:
        raise NetpbmError(f"write_pgm needs an [H, W] image, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())
