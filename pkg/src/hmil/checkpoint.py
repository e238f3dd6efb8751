"""Binary parameter container.

Layout (little-endian)::

    b"HMIL" | version u16 | count u32 |
    count x ( name_len u16 | name utf-8 | rank u8 | dims u32*rank | f64*prod(dims) )
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"HMIL"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def dumps(params: Mapping[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<HI", VERSION, len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    def need(off, n):
        if off + n > len(buf):
            raise CheckpointFormatError(f"truncated checkpoint at byte {off} (need {n} more bytes)")

    need(0, 10)
    if buf[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic at byte 0: expected {MAGIC!r}, got {buf[:4]!r}")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} at byte 4")
    off = 10
    params = {}
    for _ in range(count):
        need(off, 2)
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        need(off, nlen + 1)
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        rank = buf[off]
        off += 1
        need(off, 4 * rank)
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        need(off, nbytes)
        params[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=off).reshape(dims).astype(np.float64)
        off += nbytes
    if off != len(buf):
        raise CheckpointFormatError(f"{len(buf) - off} trailing bytes after byte {off}")
    return params


def save_checkpoint(path, params: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.write_bytes(dumps(params))
    return path


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
