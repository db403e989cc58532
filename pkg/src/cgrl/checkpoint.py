"""Binary container for parameter tensors and run metadata.

Layout (all integers little-endian):

    magic  b"CGRL1"
    u8     format version (currently 1)
    u32    metadata length, then that many bytes of JSON (sorted keys)
    u32    tensor count
    per tensor, sorted by name:
        u16          name length, then the name (UTF-8)
        u8           rank, then rank * u32 dimensions
        u64          payload byte length (must equal 8 * prod(dims))
        float64[]    C-order little-endian values

Serialization is fully deterministic, so save -> load -> save is
byte-identical.  Writes go through a temp file and a rename.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"CGRL1"
VERSION = 1


class CheckpointError(RuntimeError):
    """Base class for malformed or mismatched checkpoint files."""


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class TensorShapeError(CheckpointError):
    pass


class FingerprintMismatchError(CheckpointError):
    pass


def _pack(metadata: dict, tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<B", VERSION)]
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode()
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")  # keeps 0-d scalars 0-d
        encoded = name.encode()
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<Q", arr.nbytes))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def save_container(path: str, metadata: dict, tensors: dict) -> None:
    blob = _pack(metadata, tensors)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedCheckpointError(
                f"needed {n} bytes at offset {self.pos}, file has "
                f"{len(self.blob)}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals if len(vals) > 1 else vals[0]


def load_container(path: str) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise BadMagicError(f"{path} is not a CGRL1 container")
    version = r.unpack("<B")
    if version != VERSION:
        raise BadMagicError(f"unsupported container version {version}")
    meta_len = r.unpack("<I")
    try:
        metadata = json.loads(r.take(meta_len).decode())
    except ValueError as exc:
        raise TruncatedCheckpointError(f"corrupt metadata block: {exc}") from exc
    count = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        name_len = r.unpack("<H")
        name = r.take(name_len).decode()
        ndim = r.unpack("<B")
        shape = tuple(struct.unpack(f"<{ndim}I", r.take(4 * ndim))) if ndim else ()
        nbytes = r.unpack("<Q")
        expected = 8 * int(np.prod(shape, dtype=np.int64)) if shape else 8
        if nbytes != expected:
            raise TensorShapeError(
                f"tensor '{name}' declares {nbytes} bytes but shape {shape} "
                f"needs {expected}")
        data = r.take(nbytes)
        tensors[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
    if r.pos != len(blob):
        raise TruncatedCheckpointError(
            f"{len(blob) - r.pos} trailing bytes after last tensor")
    return metadata, tensors


def save_checkpoint(path: str, metadata: dict, tensors: dict) -> None:
    save_container(path, metadata, tensors)


def load_checkpoint(path: str, expect_fingerprint: str | None = None,
                    skip_prefixes: tuple[str, ...] = ()) -> tuple[dict, dict]:
    """Load a checkpoint, optionally dropping whole agent groups.

    skip_prefixes lets a run restore only the agents it still uses, e.g.
    dropping every "internal." tensor when those nodes switch to the convex
    solver.
    """
    metadata, tensors = load_container(path)
    if expect_fingerprint is not None:
        found = metadata.get("graph_fingerprint")
        if found != expect_fingerprint:
            raise FingerprintMismatchError(
                f"checkpoint graph fingerprint {found!r} does not match "
                f"expected {expect_fingerprint!r}")
    if skip_prefixes:
        tensors = {name: arr for name, arr in tensors.items()
                   if not name.startswith(tuple(skip_prefixes))}
    return metadata, tensors
