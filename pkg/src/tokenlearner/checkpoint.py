"""Named-tensor archive ("TLKT1").

Layout: the 6-byte magic ``b"TLKT1\\n"`` followed by records of
``u32 name_len | utf-8 name | u32 rank | u32 dims[rank] | f32 payload``,
all little-endian. Payloads are row-major float32.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"TLKT1\n"
_U32 = struct.Struct("<I")


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(_U32.pack(len(raw)))
        buf.write(raw)
        buf.write(_U32.pack(arr.ndim))
        for d in arr.shape:
            buf.write(_U32.pack(d))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("not a TLKT1 archive (bad magic)")
    out: dict[str, np.ndarray] = {}
    pos = len(MAGIC)
    end = len(blob)

    def take(n):
        nonlocal pos
        if pos + n > end:
            raise CheckpointError(f"truncated archive at byte {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < end:
        (name_len,) = _U32.unpack(take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"record name at byte {pos} is not utf-8") from None
        (rank,) = _U32.unpack(take(4))
        shape = tuple(_U32.unpack(take(4))[0] for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        payload = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        if name in out:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        out[name] = payload.astype(np.float32)
    return out


def save(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path) -> dict[str, np.ndarray]:
    """Read a whole archive; nothing is returned unless every record parses."""
    return loads(Path(path).read_bytes())
