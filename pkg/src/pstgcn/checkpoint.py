"""Binary parameter container.

Layout (all integers little-endian)::

    b"PSTG"            magic
    u32                format version (1)
    u32                record count
    per record:
      u16 + bytes      name, UTF-8
      u8               dtype code (0 float64, 1 float32, 2 int64, 3 UTF-8 text)
      u8               ndim
      u64 * ndim       shape
      raw bytes        values, little-endian, row-major

Text records hold JSON metadata (architecture, topology) as a 1-d byte array.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PSTG"
VERSION = 1
_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1, np.dtype("<i8"): 2}
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
TEXT = 3


class CheckpointError(ValueError):
    pass


def write_records(path, arrays: dict, meta: dict | None = None) -> None:
    """Write named arrays (and optional JSON metadata under ``__meta__``)."""
    records = []
    if meta is not None:
        records.append(("__meta__", TEXT, np.frombuffer(json.dumps(meta).encode(), dtype="u1")))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<")
        if le not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        records.append((name, _CODES[le], np.asarray(arr, dtype=le, order="C")))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(records)))
        for name, code, arr in records:
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def read_records(path) -> tuple[dict, dict | None]:
    data = Path(path).read_bytes()
    try:
        return _parse(path, data)
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc


def _parse(path, data: bytes) -> tuple[dict, dict | None]:
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {data[:4]!r})")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 12
    arrays, meta = {}, None
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode()
        pos += nlen
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        dtype = _DTYPES.get(code)
        if dtype is None:
            raise CheckpointError(f"{path}: unknown dtype code {code} in record {name!r}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if pos + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated record {name!r}")
        arr = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape)
        pos += nbytes
        if code == TEXT:
            meta = json.loads(arr.tobytes().decode())
        else:
            arrays[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    return arrays, meta
