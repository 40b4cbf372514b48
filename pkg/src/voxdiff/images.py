"""Binary PPM (P6, 8-bit) and little-endian PFM image files."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    px = to_uint8(img)
    if px.ndim != 3 or px.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {px.shape}")
    h, w, _ = px.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + px.tobytes())


def _tokens(blob: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens (skipping # comments)."""
    out, pos = [], 0
    while len(out) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated image header")
        out.append(blob[start:pos])
    return out, pos + 1


def read_ppm(path) -> np.ndarray:
    """Returns float64 values in [0, 1], shape (H, W, 3)."""
    blob = Path(path).read_bytes()
    (magic, w, h, maxval), off = _tokens(blob, 4)
    if magic != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=off)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_pfm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype="<f4")
    h, w, _ = img.shape
    # PFM stores rows bottom-to-top; negative scale marks little-endian
    Path(path).write_bytes(b"PF\n%d %d\n-1.0\n" % (w, h) + np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    (magic, w, h, scale), off = _tokens(blob, 4)
    if magic != b"PF":
        raise ValueError(f"{path}: not a color PFM")
    w, h = int(w), int(h)
    dtype = "<f4" if float(scale) < 0 else ">f4"
    data = np.frombuffer(blob, dtype=dtype, count=w * h * 3, offset=off).reshape(h, w, 3)
    return data[::-1].astype(np.float32)
