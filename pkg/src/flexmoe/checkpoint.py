"""Self-describing binary checkpoints.

Layout (little-endian)::

    b"FLEXCKPT" | u32 version | u64 header length | header JSON | f32 payload | u32 CRC32

The header carries the caller's metadata plus a tensor table of
``(name, shape, offset)``; offsets index f32 elements in the payload. The
CRC covers every preceding byte.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from flexmoe.errors import CheckpointError

MAGIC = b"FLEXCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def encode(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    table = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4", order="C")  # keeps 0-d shapes
        if not np.isfinite(arr).all():
            raise CheckpointError(f"refusing to save non-finite tensor {name!r}")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    meta = json.dumps({"meta": header, "tensors": table}, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, VERSION, len(meta)) + meta + b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < _PREFIX.size + 4:
        raise CheckpointError("checkpoint truncated: shorter than its fixed header")
    magic, version, hlen = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError("not a flexmoe checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    body, crc = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    start = _PREFIX.size
    if start + hlen > len(body):
        raise CheckpointError("checkpoint truncated inside the header")
    try:
        info = json.loads(body[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError("checkpoint header is corrupt") from None
    payload = body[start + hlen :]
    n = sum(int(np.prod(t["shape"], dtype=np.int64)) for t in info["tensors"])
    if len(payload) != 4 * n:
        raise CheckpointError(f"checkpoint truncated: payload has {len(payload)} bytes, table needs {4 * n}")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch (file corrupted)")
    flat = np.frombuffer(payload, dtype="<f4")
    tensors = {}
    for t in info["tensors"]:
        size = int(np.prod(t["shape"], dtype=np.int64))
        tensors[t["name"]] = flat[t["offset"] : t["offset"] + size].reshape(t["shape"]).astype(np.float64)
    return info["meta"], tensors


def save(path: str | Path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write atomically: a crash mid-write never leaves a partial file under ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(header, tensors))
    os.replace(tmp, path)


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from None
    return decode(blob)
