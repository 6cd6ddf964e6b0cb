"""Self-describing parameter container.

Layout::

    b"SYNREC1"                      magic + format version
    uint32 little-endian            header length in bytes
    header                          UTF-8 JSON object (sorted keys)
    blocks                          little-endian float64, in header order

The header carries caller metadata plus ``"blocks"``: a list of
``{"name": ..., "shape": [...]}`` entries describing the payload.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SYNREC1"


class CheckpointError(ValueError):
    pass


def to_bytes(header: dict, blocks: dict) -> bytes:
    if "blocks" in header:
        raise CheckpointError("'blocks' is a reserved header key")
    names = sorted(blocks)
    meta = dict(header)
    meta["blocks"] = [{"name": n, "shape": list(np.shape(blocks[n]))} for n in names]
    head = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(head)), head]
    for n in names:
        parts.append(np.ascontiguousarray(blocks[n], dtype="<f8").tobytes())
    return b"".join(parts)


def from_bytes(raw: bytes):
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a SYNREC1 container")
    offset = len(MAGIC)
    if len(raw) < offset + 4:
        raise CheckpointError("truncated header length")
    (head_len,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    try:
        header = json.loads(raw[offset:offset + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    offset += head_len
    blocks = {}
    for entry in header.pop("blocks"):
        shape = tuple(entry["shape"])
        size = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + size > len(raw):
            raise CheckpointError(f"block {entry['name']!r} is truncated")
        arr = np.frombuffer(raw, dtype="<f8", count=size // 8, offset=offset)
        blocks[entry["name"]] = arr.astype(np.float64).reshape(shape)
        offset += size
    if offset != len(raw):
        raise CheckpointError(f"{len(raw) - offset} trailing bytes")
    return header, blocks


def write(sink, header: dict, blocks: dict) -> int:
    payload = to_bytes(header, blocks)
    if isinstance(sink, (str, Path)):
        Path(sink).write_bytes(payload)
    else:
        sink.write(payload)
    return len(payload)


def read(source):
    if isinstance(source, (str, Path)):
        raw = Path(source).read_bytes()
    elif isinstance(source, (bytes, bytearray)):
        raw = bytes(source)
    elif isinstance(source, io.IOBase) or hasattr(source, "read"):
        raw = source.read()
    else:
        raise CheckpointError(f"cannot read a checkpoint from {type(source).__name__}")
    return from_bytes(raw)
