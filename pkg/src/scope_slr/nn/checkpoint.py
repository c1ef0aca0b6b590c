"""Binary checkpoint container.

Layout (little-endian)::

    b"SCPE" | u32 version | u32 n | n bytes UTF-8 JSON header
    u32 record_count
    record_count x ( u32 name_len | name | u32 rank | rank x u32 dims | float64 payload )

The JSON header holds the model config, gloss vocabulary, dataset statistics
and the run configuration, so a checkpoint is self-contained.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from ..errors import DataError

MAGIC = b"SCPE"
VERSION = 1


def dumps(header: dict[str, Any], params: dict[str, np.ndarray]) -> bytes:
    blob = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        key = name.encode("utf-8")
        parts.append(struct.pack("<I", len(key)))
        parts.append(key)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(raw: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    if raw[:4] != MAGIC:
        raise DataError("not a checkpoint: bad magic")
    try:
        version, n = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        pos = 12
        header = json.loads(raw[pos:pos + n].decode("utf-8"))
        pos += n
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + klen].decode("utf-8")
            pos += klen
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(dims)
            pos += 8 * size
            params[name] = arr.astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise DataError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(raw):
        raise DataError(f"corrupt checkpoint: {len(raw) - pos} trailing bytes")
    return header, params


def save(path: str | Path, header: dict[str, Any], params: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(header, params))


def load(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
