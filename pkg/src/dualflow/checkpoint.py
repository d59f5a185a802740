"""SFDC checkpoint container.

Layout: ``b"SFDC"``, u32 version (1), u64 header length, UTF-8 JSON header,
then a little-endian float32 blob.  The header is an object with a
``tensors`` manifest (``[{name, shape, byte_offset}]``, offsets relative to
the blob start) and a free-form ``meta`` dict.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"SFDC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> bytes:
    manifest = []
    blobs = []
    offset = 0
    for name in tensors:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "byte_offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"tensors": manifest, "meta": meta or {}}, sort_keys=True,
                        separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(blobs)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise CheckpointError("not an SFDC checkpoint")
    version, hlen = struct.unpack("<IQ", buf[4:16])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(buf[16:16 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupt checkpoint header") from exc
    blob = memoryview(buf)[16 + hlen:]
    out = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["byte_offset"]
        if start + 4 * count > len(blob):
            raise CheckpointError(f"truncated tensor {entry['name']}")
        out[entry["name"]] = np.frombuffer(blob[start:start + 4 * count], dtype="<f4").reshape(shape).astype(np.float32)
    return out, header.get("meta", {})


def save(path: str | Path, tensors: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return loads(Path(path).read_bytes())
