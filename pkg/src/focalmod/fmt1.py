"""FMT1 binary tensor container.

One record is::

    b"FMT1" | u32 rank | u32 dims[rank] | u8 dtype (0 = f64, 1 = f32) | raw data

All integers and payloads are little-endian, data is row-major. A container
file is a plain concatenation of records.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

from .exceptions import InputError

MAGIC = b"FMT1"
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_TAGS = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    tag = _TAGS.get(arr.dtype)
    if tag is None:
        raise InputError(f"FMT1 supports float64/float32 only, got {arr.dtype}")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(struct.pack("<B", tag))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise InputError(f"truncated FMT1 record: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray | None:
    """Read one record; returns None at a clean end of file."""
    magic = fh.read(4)
    if not magic:
        return None
    if magic != MAGIC:
        raise InputError(f"bad FMT1 magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    (tag,) = struct.unpack("<B", _read_exact(fh, 1))
    if tag not in _DTYPES:
        raise InputError(f"unknown FMT1 dtype tag {tag}")
    dtype = _DTYPES[tag]
    count = int(np.prod(dims, dtype=np.int64))
    data = np.frombuffer(_read_exact(fh, count * dtype.itemsize), dtype=dtype)
    return data.reshape(dims).astype(dtype.newbyteorder("="))


def save(path, arrays: Iterable[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        for arr in arrays:
            write_tensor(fh, arr)


def load(path) -> list[np.ndarray]:
    out = []
    try:
        with open(path, "rb") as fh:
            while (arr := read_tensor(fh)) is not None:
                out.append(arr)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    return out


def save_named(path, named: dict[str, np.ndarray]) -> Path:
    """Write tensors plus a ``.manifest`` sidecar of ``name shape dtype`` lines."""
    path = Path(path)
    save(path, named.values())
    manifest = path.with_suffix(path.suffix + ".manifest")
    lines = [f"{name} {'x'.join(map(str, a.shape)) or '-'} {np.asarray(a).dtype.name}"
             for name, a in named.items()]
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_named(path) -> dict[str, np.ndarray]:
    path = Path(path)
    manifest = path.with_suffix(path.suffix + ".manifest")
    arrays = load(path)
    names = [ln.split()[0] for ln in manifest.read_text().splitlines() if ln.strip()]
    if len(names) != len(arrays):
        raise InputError(f"{manifest} lists {len(names)} tensors but {path} holds {len(arrays)}")
    return dict(zip(names, arrays))
