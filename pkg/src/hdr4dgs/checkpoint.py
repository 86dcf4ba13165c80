"""Flat binary checkpoint container.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then every array as little-endian float32 in the order listed in the header.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"H4DGCKPT"


def encode(header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    meta = dict(header)
    meta["arrays"] = [{"name": k, "shape": list(np.shape(v)), "dtype": "<f4"} for k, v in arrays.items()]
    head = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in arrays.values())
    return MAGIC + struct.pack("<Q", len(head)) + head + body


def decode(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:8] != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    try:
        (n,) = struct.unpack("<Q", blob[8:16])
        header = json.loads(blob[16:16 + n].decode("utf-8"))
        offset = 16 + n
        arrays = {}
        for spec in header.pop("arrays"):
            count = int(np.prod(spec["shape"], dtype=np.int64))
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(spec["shape"])
            arrays[spec["name"]] = arr.copy()
            offset += 4 * count
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if offset != len(blob):
        raise CheckpointError(f"checkpoint has {len(blob) - offset} trailing bytes")
    return header, arrays


def save(path, header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    blob = encode(header, arrays)
    with open(path, "wb") as f:
        f.write(blob)
    return blob


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        return decode(f.read())
