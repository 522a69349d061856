"""The "CSE1" named-tensor container used for checkpoints and feature files.

Layout (all integers little-endian)::

    b"CSE1"  u32 version  u32 record count
    per record: u32 name length, UTF-8 name, u8 dtype code, u32 rank,
                u64 dims[rank], u64 absolute payload offset
    payloads, raw little-endian, in record order

dtype codes: 1 = f32, 2 = i64, 3 = f64, 4 = u8.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ContainerError, TruncatedFileError, VersionMismatchError

MAGIC = b"CSE1"
VERSION = 1
CONFIG_KEY = "__config__"

_CODES = {1: np.dtype("<f4"), 2: np.dtype("<i8"), 3: np.dtype("<f8"), 4: np.dtype("u1")}
_BY_DTYPE = {np.dtype(np.float32): 1, np.dtype(np.int64): 2, np.dtype(np.float64): 3, np.dtype(np.uint8): 4}


def _code_for(arr: np.ndarray) -> int:
    try:
        return _BY_DTYPE[arr.dtype.newbyteorder("=")]
    except KeyError:
        raise ContainerError(f"unsupported dtype {arr.dtype}") from None


def encode_json(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def decode_json(arr: np.ndarray):
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8"))


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    items = [(name, np.ascontiguousarray(arr)) for name, arr in tensors.items()]
    header = bytearray()
    header += MAGIC + struct.pack("<II", VERSION, len(items))
    records = []
    for name, arr in items:
        encoded = name.encode("utf-8")
        rec = struct.pack("<I", len(encoded)) + encoded + struct.pack("<BI", _code_for(arr), arr.ndim)
        rec += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        records.append(rec)
    offset = len(header) + sum(len(r) + 8 for r in records)
    payloads = []
    for rec, (_, arr) in zip(records, items):
        header += rec + struct.pack("<Q", offset)
        data = arr.astype(_CODES[_code_for(arr)], copy=False).tobytes()
        payloads.append(data)
        offset += len(data)
    Path(path).write_bytes(bytes(header) + b"".join(payloads))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError("container ends inside its header")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic (not a CSE1 container)")
    r.pos = 4
    version, count = r.unpack("<II")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: container version {version}, expected {VERSION}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        code, rank = r.unpack("<BI")
        if code not in _CODES:
            raise ContainerError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        (offset,) = r.unpack("<Q")
        dtype = _CODES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(buf):
            raise TruncatedFileError(f"{path}: payload of {name!r} extends past end of file")
        arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
        out[name] = arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True)
    return out
