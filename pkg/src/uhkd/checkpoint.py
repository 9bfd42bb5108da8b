"""Flat binary checkpoints.

Layout, all little-endian::

    magic    8 bytes  b"UHKDCKPT"
    version  u32
    count    u32
    count x entry:
        path_len u16, path (UTF-8, path_len bytes)
        rank     u32, extents rank x u64
        data     prod(extents) x f64, row-major
    crc32    u32 over every preceding byte (magic included)

A JSON sidecar ``<file>.json`` carries what is needed to rebuild the model
(preset, spec, recipe); the binary holds tensors only.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"UHKDCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(entries) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for path, arr in entries.items():
        arr = np.asarray(arr, dtype=np.float64)
        p = path.encode("utf-8")
        if len(p) > 0xFFFF:
            raise CheckpointError(f"path too long: {path[:40]}...")
        parts.append(struct.pack("<H", len(p)))
        parts.append(p)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def decode(buf: bytes) -> OrderedDict[str, np.ndarray]:
    if len(buf) < 20 or buf[:8] != MAGIC:
        raise CheckpointError("not a UHKDCKPT file")
    payload, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CheckpointError("CRC mismatch: checkpoint is corrupt")
    version, count = struct.unpack_from("<II", payload, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 16
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    try:
        for _ in range(count):
            (plen,) = struct.unpack_from("<H", payload, off)
            off += 2
            path = payload[off : off + plen].decode("utf-8")
            off += plen
            (rank,) = struct.unpack_from("<I", payload, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", payload, off)
            off += 8 * rank
            n = math.prod(shape)
            out[path] = np.frombuffer(payload, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
            off += 8 * n
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint at byte {off}: {exc}") from None
    if off != len(payload):
        raise CheckpointError(f"{len(payload) - off} trailing bytes after last entry")
    return out


def save(path, entries, meta: dict | None = None) -> str:
    """Write a checkpoint (and sidecar when ``meta`` is given); returns its sha256."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = encode(entries)
    path.write_bytes(buf)
    if meta is not None:
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return hashlib.sha256(buf).hexdigest()


def load(path) -> tuple[OrderedDict[str, np.ndarray], dict]:
    path = Path(path)
    entries = decode(path.read_bytes())
    side = Path(str(path) + ".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return entries, meta


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
