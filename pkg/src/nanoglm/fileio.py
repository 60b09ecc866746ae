"""Shared binary container layout for weight, adapter, and quantized files.

All three on-disk formats use the same skeleton, documented byte-exactly in
the README:

    magic          4 bytes (``NGLM`` / ``NGLA`` / ``NGQ4``)
    version        u32 little-endian
    meta block     u32 byte length + that many bytes of UTF-8 JSON
    record count   u32
    records        repeated tensor records

Tensor record:

    name           u16 byte length + UTF-8 bytes
    dtype tag      u8 (0=f32, 1=f64, 2=f16, 3=u8, 4=i8)
    ndim           u8
    dims           u32 each
    payload        little-endian element bytes, row-major

Every multi-byte integer is little-endian. Reads validate magic, version,
and exact payload sizes; truncation raises :class:`CorruptFileError` and
never yields a partial object.
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO

import numpy as np

from .errors import BadMagicError, CorruptFileError, VersionMismatchError

_DTYPE_TAGS: dict[str, int] = {
    "float32": 0,
    "float64": 1,
    "float16": 2,
    "uint8": 3,
    "int8": 4,
}
_TAG_DTYPES: dict[int, np.dtype] = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<f2"),
    3: np.dtype("u1"),
    4: np.dtype("i1"),
}


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CorruptFileError(f"unexpected end of file (wanted {n} bytes, got {len(buf)})")
    return buf


def write_header(f: BinaryIO, magic: bytes, version: int, meta: dict) -> None:
    assert len(magic) == 4
    f.write(magic)
    f.write(struct.pack("<I", version))
    blob = json.dumps(meta, ensure_ascii=False, sort_keys=True).encode("utf-8")
    f.write(struct.pack("<I", len(blob)))
    f.write(blob)


def read_header(f: BinaryIO, magic: bytes, version: int) -> dict:
    got = _read_exact(f, 4)
    if got != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {got!r}")
    (ver,) = struct.unpack("<I", _read_exact(f, 4))
    if ver != version:
        raise VersionMismatchError(f"unsupported version {ver} (expected {version})")
    (meta_len,) = struct.unpack("<I", _read_exact(f, 4))
    try:
        meta = json.loads(_read_exact(f, meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"meta block is not valid JSON: {exc}") from exc
    if not isinstance(meta, dict):
        raise CorruptFileError("meta block must be a JSON object")
    return meta


def write_record_count(f: BinaryIO, n: int) -> None:
    f.write(struct.pack("<I", n))


def read_record_count(f: BinaryIO) -> int:
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    return n


def write_tensor_record(f: BinaryIO, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    if arr.dtype.name not in _DTYPE_TAGS:
        raise ValueError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
    tag = _DTYPE_TAGS[arr.dtype.name]
    name_b = name.encode("utf-8")
    f.write(struct.pack("<H", len(name_b)))
    f.write(name_b)
    f.write(struct.pack("<BB", tag, arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(arr.tobytes(order="C"))


def read_tensor_record(f: BinaryIO) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(f, 2))
    name = _read_exact(f, name_len).decode("utf-8")
    tag, ndim = struct.unpack("<BB", _read_exact(f, 2))
    if tag not in _TAG_DTYPES:
        raise CorruptFileError(f"tensor {name!r}: unknown dtype tag {tag}")
    dims = [struct.unpack("<I", _read_exact(f, 4))[0] for _ in range(ndim)]
    dtype = _TAG_DTYPES[tag]
    count = int(np.prod(dims)) if dims else 1
    payload = _read_exact(f, count * dtype.itemsize)
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    return name, arr
