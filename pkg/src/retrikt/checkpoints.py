"""Shared binary checkpoint format: JSON header + little-endian float32 tensors + sha256."""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"RKCK"
VERSION = 1


class CheckpointError(IOError):
    """Raised on malformed, truncated or corrupted checkpoint files."""


def save_tensors(path, kind: str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Tensors are stored as float32 little-endian in dict order."""
    header = {
        "kind": kind,
        "meta": meta,
        "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in tensors.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray()
    body += MAGIC
    body += struct.pack("<I", VERSION)
    body += struct.pack("<I", len(header_bytes))
    body += header_bytes
    for arr in tensors.values():
        body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    digest = hashlib.sha256(bytes(body)).digest()
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(digest)


def load_tensors(path, expect_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 44:
        raise CheckpointError(f"{path}: truncated at offset {len(raw)} (no complete header)")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (header_len,) = struct.unpack_from("<I", raw, 8)
    offset = 12 + header_len
    if len(raw) < offset:
        raise CheckpointError(f"{path}: truncated at offset {len(raw)} (header needs {offset} bytes)")
    header = json.loads(raw[12:offset].decode("utf-8"))
    if expect_kind is not None and header["kind"] != expect_kind:
        raise CheckpointError(f"{path}: expected kind {expect_kind!r}, found {header['kind']!r}")

    body_end = offset
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if len(raw) < body_end + nbytes:
            raise CheckpointError(f"{path}: truncated at offset {len(raw)} (tensor {entry['name']!r} needs {body_end + nbytes})")
        flat = np.frombuffer(raw, dtype="<f4", count=max(int(np.prod(shape, dtype=np.int64)), 1), offset=body_end)
        tensors[entry["name"]] = flat.reshape(shape).copy()
        body_end += nbytes

    if len(raw) < body_end + 32:
        raise CheckpointError(f"{path}: truncated at offset {len(raw)} (checksum missing)")
    stored = raw[body_end : body_end + 32]
    actual = hashlib.sha256(raw[:body_end]).digest()
    if stored != actual:
        raise CheckpointError(f"{path}: checksum mismatch")
    return header["meta"], tensors


def file_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
