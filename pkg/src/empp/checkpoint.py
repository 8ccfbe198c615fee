"""Binary array container used for checkpoints and dataset caches.

Layout (all integers little-endian ``u32``)::

    b"EMPPCKPT"  version
    repeated:  name_len  name(utf-8)  rank  dim_0 .. dim_{rank-1}  f64 payload (LE, C order)

Text values (e.g. the effective config) are stored as rank-1 records named
``text:<key>`` whose payload holds the UTF-8 byte values.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EMPPCKPT"
VERSION = 1
_TEXT = "text:"


class CheckpointError(ValueError):
    pass


def write_container(path, arrays: dict[str, np.ndarray], text: dict[str, str] | None = None) -> None:
    records = dict(arrays)
    for key, value in (text or {}).items():
        records[_TEXT + key] = np.frombuffer(value.encode("utf-8"), dtype=np.uint8).astype(np.float64)
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in records.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def read_container(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not an EMPP container (bad magic)")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    arrays: dict[str, np.ndarray] = {}
    text: dict[str, str] = {}
    while pos < len(data):
        (n,) = take("<I")
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = take("<I")
        shape = take(f"<{rank}I") if rank else ()
        count = int(np.prod(shape)) if rank else 1
        if pos + 8 * count > len(data):
            raise CheckpointError(f"{path}: truncated payload for {name!r}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
        if name.startswith(_TEXT):
            text[name[len(_TEXT) :]] = bytes(arr.astype(np.uint8)).decode("utf-8")
        else:
            arrays[name] = arr
    return arrays, text
