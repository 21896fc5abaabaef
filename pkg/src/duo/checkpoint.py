"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"DUO1" | version u32 | tensor count u32
    per tensor: name length u32 | UTF-8 name | rank u32 | extents u64 * rank | float32 data
    CRC-32 (u32) of every preceding byte
"""
import struct
import zlib

import numpy as np

from .errors import CheckpointError

MAGIC = b"DUO1"
VERSION = 1


def dumps(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(getattr(arr, "data", arr), dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(blob: bytes) -> dict:
    if len(blob) < 16:
        raise CheckpointError("checkpoint truncated")
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(body):
                raise CheckpointError(f"checkpoint truncated inside tensor {name!r}")
            out[name] = np.frombuffer(body, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).copy()
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"checkpoint truncated ({exc})") from None
    if pos != len(body):
        raise CheckpointError("trailing bytes after the last tensor")
    return out


def save_checkpoint(tensors: dict, path):
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        return loads(fh.read())
