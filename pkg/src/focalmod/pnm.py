"""Minimal binary PGM (P5) / PPM (P6) reader and writer, 8-bit only."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .exceptions import InputError


def _tokens(data: bytes, count: int, pos: int):
    out = []
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InputError("truncated PNM header")
        out.append(data[start:pos])
    return out, pos + 1  # single whitespace byte after maxval


def read_pnm(path) -> np.ndarray:
    """Read a P5/P6 file as uint8, shape (H, W) or (H, W, 3)."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise InputError(f"{path}: unsupported magic {magic!r}, expected P5 or P6")
    (w, h, maxval), pos = _tokens(data, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise InputError(f"{path}: only maxval 255 is supported, got {maxval}")
    ch = 3 if magic == b"P6" else 1
    raw = data[pos:pos + w * h * ch]
    if len(raw) != w * h * ch:
        raise InputError(f"{path}: expected {w * h * ch} pixel bytes, got {len(raw)}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, ch)
    return arr[..., 0].copy() if ch == 1 else arr.copy()


def write_pgm(path, img: np.ndarray) -> Path:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise InputError(f"PGM needs a 2-D uint8 array, got {img.dtype} {img.shape}")
    path = Path(path)
    try:
        path.write_bytes(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]) + img.tobytes())
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc}") from exc
    return path


def write_ppm(path, img: np.ndarray) -> Path:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise InputError(f"PPM needs an (H, W, 3) uint8 array, got {img.dtype} {img.shape}")
    path = Path(path)
    try:
        path.write_bytes(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]) + img.tobytes())
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc}") from exc
    return path


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1] and quantize with round-half-even to 0..255.

    A constant map becomes all zeros.
    """
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    norm = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    return np.rint(norm * 255.0).astype(np.uint8)
