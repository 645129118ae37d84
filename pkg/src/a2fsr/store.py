"""Binary checkpoint format (``.a2f``).

Layout, all integers little-endian::

    b"A2FC" | u32 version | u32 len + UTF-8 JSON header | u32 entry count
    per entry: u32 len + UTF-8 name | u32 rank | rank x u32 dims | f32 payload
    u64 FNV-1a over every preceding byte

The JSON header carries the model configuration, free-form metadata and the
optimizer step counter.  Adam moments, when present, are stored as ordinary
entries named ``adam.m.<param>`` and ``adam.v.<param>``.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    ShapeMismatchError,
    StorageError,
    VersionError,
)
from .model import A2FModel, ModelConfig

MAGIC = b"A2FC"
FORMAT_VERSION = 1
EXTENSION = ".a2f"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1
_M_PREFIX = "adam.m."
_V_PREFIX = "adam.v."


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def _encode_entry(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.asarray(arr)
    parts = [_u32(len(raw)), raw, _u32(arr.ndim)]
    parts += [_u32(d) for d in arr.shape]
    parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def encode_checkpoint(model: A2FModel, optimizer_state=None, metadata: dict | None = None) -> bytes:
    """Serialize to bytes; :func:`save_checkpoint` writes the result to disk."""
    header = {
        "config": model.config.to_dict(),
        "metadata": dict(metadata or {}),
        "optimizer": None if optimizer_state is None else {"step": int(optimizer_state.t)},
    }
    entries = [(name, slot.value) for name, slot in model.named_parameters()]
    if optimizer_state is not None:
        names = [n for n, _ in entries]
        missing = [n for n in names if n not in optimizer_state.m or n not in optimizer_state.v]
        if missing:
            raise StorageError(f"optimizer state lacks moments for {missing[0]}")
        entries += [(_M_PREFIX + n, optimizer_state.m[n]) for n in names]
        entries += [(_V_PREFIX + n, optimizer_state.v[n]) for n in names]

    header_raw = json.dumps(header, sort_keys=True).encode("utf-8")
    body = [MAGIC, _u32(FORMAT_VERSION), _u32(len(header_raw)), header_raw, _u32(len(entries))]
    body += [_encode_entry(n, a) for n, a in entries]
    blob = b"".join(body)
    return blob + struct.pack("<Q", fnv1a64(blob))


def save_checkpoint(model: A2FModel, path, optimizer_state=None, metadata: dict | None = None) -> Path:
    path = Path(path)
    blob = encode_checkpoint(model, optimizer_state, metadata)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise StorageError(f"{self.path}: unexpected end of data at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise StorageError(f"{self.path}: invalid UTF-8 string") from exc


def decode_checkpoint(data: bytes, path="<bytes>"):
    """Parse bytes into ``(header, entries)`` after validating magic, version and checksum."""
    if len(data) < 8 or data[:4] != MAGIC:
        raise BadMagicError(f"{path}: not an .a2f checkpoint (bad magic)")
    version = struct.unpack("<I", data[4:8])[0]
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported format version {version}, expected {FORMAT_VERSION}")
    if len(data) < 8 + 8:
        raise ChecksumError(f"{path}: file truncated before checksum")
    stored = struct.unpack("<Q", data[-8:])[0]
    if stored != fnv1a64(data[:-8]):
        raise ChecksumError(f"{path}: checksum mismatch (file truncated or corrupted)")

    r = _Reader(data[:-8], path)
    r.take(8)
    try:
        header = json.loads(r.text())
    except json.JSONDecodeError as exc:
        raise StorageError(f"{path}: malformed header JSON") from exc
    entries = {}
    for _ in range(r.u32()):
        name = r.text()
        dims = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
        if name in entries:
            raise StorageError(f"{path}: duplicate entry {name}")
        entries[name] = arr.astype(np.float32)
    if r.pos != len(r.data):
        raise StorageError(f"{path}: {len(r.data) - r.pos} trailing bytes after entries")
    return header, entries


def load_checkpoint(path):
    """Returns ``(model, optimizer_state or None, metadata)``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
    header, entries = decode_checkpoint(data, path)
    try:
        config = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise StorageError(f"{path}: invalid model configuration in header: {exc}") from exc

    model = A2FModel(config)
    expected = dict(model.named_parameters())
    stored_params = {n for n in entries if not n.startswith(("adam.m.", "adam.v."))}
    missing = [n for n in expected if n not in entries]
    extra = sorted(stored_params - set(expected))
    if missing or extra:
        raise ShapeMismatchError(
            f"{path}: tensors do not match config {config.name} "
            f"(missing {missing[:3]}, unexpected {extra[:3]})"
        )
    for name, slot in expected.items():
        if entries[name].shape != slot.value.shape:
            raise ShapeMismatchError(
                f"{path}: {name} has shape {entries[name].shape}, config expects {slot.value.shape}"
            )
        slot.value[...] = entries[name]

    optimizer_state = None
    if header.get("optimizer") is not None:
        from .train import AdamState

        m, v = {}, {}
        for name, slot in expected.items():
            for prefix, dest in ((_M_PREFIX, m), (_V_PREFIX, v)):
                arr = entries.get(prefix + name)
                if arr is None or arr.shape != slot.value.shape:
                    raise ShapeMismatchError(f"{path}: optimizer moment {prefix + name} missing or misshaped")
                dest[name] = arr.copy()
        optimizer_state = AdamState(m=m, v=v, t=int(header["optimizer"]["step"]))
    return model, optimizer_state, header.get("metadata", {})
