"""Little-endian, shape-prefixed binary tensor files.

Record layout (all integers little-endian)::

    4 bytes   magic  b"LTS1"
    4 bytes   dtype tag, ASCII: b"f32 ", b"f64 " or b"i64 "
    8 bytes   uint64 ndim
    8*ndim    uint64 dims
    ...       raw element data, C order, little-endian

A weight archive is a sequence of named records::

    4 bytes   magic  b"LTSW"
    8 bytes   uint64 count
    repeated: uint32 name length, UTF-8 name, tensor record
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Dict, Mapping

import numpy as np

MAGIC = b"LTS1"
ARCHIVE_MAGIC = b"LTSW"

_TAGS = {
    np.dtype("<f4"): b"f32 ",
    np.dtype("<f8"): b"f64 ",
    np.dtype("<i8"): b"i64 ",
}
_DTYPES = {tag: dt for dt, tag in _TAGS.items()}


class CorruptTensorFile(ValueError):
    pass


def _normalize(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        dt = np.dtype("<f8") if arr.dtype.itemsize == 8 else np.dtype("<f4")
    elif arr.dtype.kind in "iub":
        dt = np.dtype("<i8")
    else:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    return np.asarray(arr, dtype=dt, order="C")


def write_record(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = _normalize(arr)
    fh.write(MAGIC)
    fh.write(_TAGS[arr.dtype])
    fh.write(struct.pack("<Q", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CorruptTensorFile("truncated tensor data")
    return buf


def read_record(fh: BinaryIO) -> np.ndarray:
    if _read_exact(fh, 4) != MAGIC:
        raise CorruptTensorFile("bad tensor magic")
    tag = _read_exact(fh, 4)
    if tag not in _DTYPES:
        raise CorruptTensorFile(f"unknown dtype tag {tag!r}")
    dtype = _DTYPES[tag]
    (ndim,) = struct.unpack("<Q", _read_exact(fh, 8))
    if ndim > 32:
        raise CorruptTensorFile("implausible rank")
    shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    data = _read_exact(fh, count * dtype.itemsize)
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_record(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_record(fh)
        if fh.read(1):
            raise CorruptTensorFile("trailing bytes after tensor")
    return arr


def tensor_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_record(buf, arr)
    return buf.getvalue()


def save_archive(path, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC)
        fh.write(struct.pack("<Q", len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            write_record(fh, arr)


def load_archive(path) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    with open(Path(path), "rb") as fh:
        if _read_exact(fh, 4) != ARCHIVE_MAGIC:
            raise CorruptTensorFile("bad archive magic")
        (count,) = struct.unpack("<Q", _read_exact(fh, 8))
        for _ in range(count):
            (n,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, n).decode("utf-8")
            out[name] = read_record(fh)
    return out
