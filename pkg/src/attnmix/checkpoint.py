"""Named-tensor binary checkpoints.

Layout::

    magic    8 bytes   b"AMIXCKPT"
    version  uint32    little-endian
    endian   1 byte    b"<" (payload is little-endian float64)
    pad      3 bytes   zero
    hlen     uint64    length of the manifest in bytes
    manifest hlen      UTF-8 JSON: [{"name", "shape", "offset"}, ...]
    payload            concatenated float64 values, offsets in bytes

The whole file is validated before any tensor is returned.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict

import numpy as np

from .errors import CheckpointFormatError, InputError

MAGIC = b"AMIXCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIc3xQ")


def save_checkpoint(tensors: Dict[str, np.ndarray], path) -> None:
    manifest, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        if not isinstance(name, str) or not name:
            raise InputError(f"tensor names must be non-empty strings, got {name!r}")
        arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    header = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, b"<", len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)
    tmp.replace(path)


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointFormatError("file shorter than the fixed header", len(raw))
    magic, version, endian, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointFormatError("bad magic", 0)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}, expected {VERSION}", 8)
    if endian != b"<":
        raise CheckpointFormatError(f"unsupported endianness tag {endian!r}", 12)
    start = _PREFIX.size
    if len(raw) < start + hlen:
        raise CheckpointFormatError("truncated manifest", len(raw))
    try:
        manifest = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable manifest: {exc}", start) from None
    if not isinstance(manifest, list):
        raise CheckpointFormatError("manifest must be a list", start)

    payload = memoryview(raw)[start + hlen:]
    expected, names, out = 0, set(), {}
    for entry in manifest:
        try:
            name, shape, offset = entry["name"], tuple(int(d) for d in entry["shape"]), int(entry["offset"])
        except (KeyError, TypeError, ValueError):
            raise CheckpointFormatError(f"malformed manifest entry {entry!r}", start) from None
        if name in names:
            raise CheckpointFormatError(f"duplicate tensor name {name!r}", start)
        if offset != expected:
            raise CheckpointFormatError(f"{name}: offset {offset}, expected {expected}",
                                        start + hlen + expected)
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(payload):
            raise CheckpointFormatError(f"{name}: payload truncated", len(raw))
        names.add(name)
        out[name] = np.frombuffer(payload[offset:offset + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
        expected = offset + nbytes
    if expected != len(payload):
        raise CheckpointFormatError(
            f"{len(payload) - expected} trailing bytes after payload", start + hlen + expected)
    return out
