"""
Binary tensor checkpoints.

Layout: b"CLNC" | u32 version | u32 header length | UTF-8 JSON header |
float32 little-endian payload in header order | u32 CRC32 of everything before it.
The header is {"tensors": [[name, shape], ...], "meta": {...}}.
"""
from __future__ import annotations

import json
import logging
import struct
import zlib
from pathlib import Path
from typing import Any

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"CLNC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    path: str | Path, tensors: dict[str, np.ndarray], meta: dict[str, Any] | None = None
) -> None:
    """Write tensors in insertion order (registration order for model parameters)."""
    header = {
        "tensors": [[name, list(np.shape(t))] for name, t in tensors.items()],
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=False).encode("utf-8")
    body = bytearray(MAGIC)
    body += struct.pack("<II", VERSION, len(header_bytes))
    body += header_bytes
    for tensor in tensors.values():
        body += np.ascontiguousarray(tensor, dtype="<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(body))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(body))
    logger.info("saved %d tensors to %s", len(tensors), path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Return (tensors as float32 arrays in header order, meta)."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (stored_crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise CheckpointError(f"{path}: CRC mismatch (truncated or corrupted file)")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    payload = raw[12 + header_len : -4]

    expected = sum(4 * int(np.prod(shape)) for _, shape in header["tensors"])
    if expected != len(payload):
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header implies {expected}")

    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in header["tensors"]:
        count = int(np.prod(shape))
        tensors[name] = (
            np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
            .astype(np.float32)
            .reshape(shape)
        )
        offset += 4 * count
    return tensors, header.get("meta", {})
