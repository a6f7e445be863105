"""Named-tensor checkpoint files.

Layout: b"TGPT1", then per tensor: u32 name length, utf-8 name, u32 rank,
u32 extents, little-endian float64 values.  All integers little-endian.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"TGPT1"


class BadCheckpoint(ValueError):
    pass


def dumps(tensors: dict) -> bytes:
    out = [MAGIC]
    for name, arr in tensors.items():
        a = np.asarray(getattr(arr, "data", arr), dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(np.ascontiguousarray(a).tobytes())
    return b"".join(out)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if not blob.startswith(MAGIC):
        raise BadCheckpoint("unknown checkpoint header")
    pos = len(MAGIC)
    result = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            vals = np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
            pos += 8 * count
            result[name] = vals.astype(np.float64).reshape(shape)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise BadCheckpoint(f"truncated or corrupt checkpoint: {e}") from None
    return result


def save(path, tensors: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
