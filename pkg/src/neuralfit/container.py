"""Binary ``MFIT`` container used for models, checkpoints and datasets.

Layout (all integers little-endian)::

    b"MFIT" | u32 version | u32 n_arrays
    repeated n_arrays times:
        u32 name_len | name (utf-8) | u8 dtype code | u32 rank | u64 dims[rank]
        | row-major payload

dtype codes: 1 = f64, 2 = i64, 3 = u8 (used for JSON meta blobs).
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import FormatError, IoError

MAGIC = b"MFIT"
VERSION = 1

_CODES = {1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_KINDS = {"f": 1, "i": 2, "u": 2, "b": 2}


def _code_for(arr: np.ndarray) -> int:
    if arr.dtype == np.uint8:
        return 3
    try:
        return _KINDS[arr.dtype.kind]
    except KeyError:
        raise FormatError(f"unsupported dtype {arr.dtype}") from None


def encode(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, value in arrays.items():
        arr = np.asarray(value)
        code = _code_for(arr)
        arr = np.ascontiguousarray(arr, dtype=_CODES[code])
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BI", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("truncated MFIT container")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError("bad magic; not an MFIT container")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported MFIT version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        code, rank = struct.unpack("<BI", take(5))
        if code not in _CODES:
            raise FormatError(f"unknown dtype code {code} for {name!r}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        dtype = _CODES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        payload = take(nbytes)
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    if pos != len(view):
        raise FormatError("trailing bytes after last array")
    return out


def write(path, arrays: dict[str, np.ndarray]) -> None:
    data = encode(arrays)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read(path) -> dict[str, np.ndarray]:
    if not os.path.exists(path):
        raise IoError(f"no such file: {path}")
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return decode(data)


def pack_meta(meta: dict) -> np.ndarray:
    text = json.dumps(meta, sort_keys=True, separators=(",", ":"))
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def unpack_meta(blob: np.ndarray) -> dict:
    try:
        return json.loads(bytes(np.asarray(blob, dtype=np.uint8)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt meta record: {exc}") from exc
