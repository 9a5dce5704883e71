"""Single-file tensor container.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"FPTQCKPT"
    offset 8   u32       format version
    offset 12  u32       manifest length M
    offset 16  32 bytes  SHA-256 of the manifest bytes
    offset 48  M bytes   manifest, UTF-8 JSON
               zero padding up to the next multiple of 64
    payload    tensor bytes; every tensor starts on a 64-byte boundary
               (offsets are relative to the payload start)

The manifest lists every tensor's name, dtype, logical shape, byte offset and
byte length, plus the payload length and SHA-256. ``u8-packed-4bit`` tensors
hold two signed values per byte, low nibble first, each row padded to whole
bytes.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import tempfile
from collections.abc import Mapping
from dataclasses import dataclass
from itertools import pairwise
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"FPTQCKPT"
FORMAT_VERSION = 1
ALIGN = 64
HEADER = struct.Struct("<8sII32s")
DTYPES = ("f32", "i8", "u8-packed-4bit")
MANIFEST_KEYS = {"format_version", "kind", "model_config", "tensors", "payload_length", "payload_sha256", "recipe"}
ENTRY_KEYS = {"name", "dtype", "shape", "byte_offset", "byte_length"}


class FormatError(ValueError):
    """Base class for every structured rejection of a container file."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class ManifestError(FormatError):
    pass


class LayoutError(FormatError):
    pass


class OverlapError(LayoutError):
    pass


def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


# -- 4-bit packing -----------------------------------------------------------


def pack4(values) -> bytes:
    """Two signed nibbles per byte, low nibble first; odd lengths get a zero pad."""
    v = np.asarray(values)
    if v.size and not np.issubdtype(v.dtype, np.integer):
        raise ValueError("pack4 takes integer values")
    v = v.astype(np.int64).ravel()
    if v.size and (v.min() < -7 or v.max() > 7):
        raise ValueError("4-bit values must lie in [-7, 7]")
    if v.size % 2:
        v = np.append(v, 0)
    nib = (v & 0xF).astype(np.uint8)
    return (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8).tobytes()


def unpack4(data, count: int | None = None) -> np.ndarray:
    """Inverse of :func:`pack4`; ``count`` drops the padding nibble."""
    b = np.frombuffer(bytes(data), dtype=np.uint8)
    out = np.empty(b.size * 2, dtype=np.int8)
    out[0::2] = (b & 0xF).astype(np.int8)
    out[1::2] = (b >> 4).astype(np.int8)
    out[out > 7] -= 16
    if count is None:
        return out
    if not 0 <= count <= out.size or out.size - count > 1:
        raise ValueError(f"count {count} does not fit {b.size} packed bytes")
    return out[:count]


def pack4_rows(q: np.ndarray) -> bytes:
    q = np.asarray(q)
    if q.ndim != 2:
        raise ValueError("pack4_rows takes a 2-D array")
    if q.shape[1] % 2:
        q = np.concatenate([q, np.zeros((q.shape[0], 1), dtype=q.dtype)], axis=1)
    return pack4(q)


def unpack4_rows(data, shape) -> np.ndarray:
    rows, cols = shape
    padded = cols + cols % 2
    return unpack4(data).reshape(rows, padded)[:, :cols]


def _byte_length(dtype: str, shape) -> int:
    n = math.prod(shape)
    if dtype == "f32":
        return 4 * n
    if dtype == "i8":
        return n
    if len(shape) != 2:
        raise ManifestError("u8-packed-4bit tensors must be 2-D")
    return shape[0] * ((shape[1] + 1) // 2)


# -- tensors ----------------------------------------------------------------


@dataclass(frozen=True)
class StoredTensor:
    """A tensor plus its on-disk dtype tag."""

    dtype: str
    array: np.ndarray

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r}")
        a = np.asarray(self.array)
        if self.dtype == "f32":
            a = a.astype(np.float32)
        else:
            a = a.astype(np.int8)
            if self.dtype == "u8-packed-4bit":
                if a.ndim != 2:
                    raise ValueError("packed 4-bit tensors must be 2-D")
                if a.size and (a.min() < -7 or a.max() > 7):
                    raise ValueError("4-bit values must lie in [-7, 7]")
        object.__setattr__(self, "array", np.ascontiguousarray(a))

    def encode(self) -> bytes:
        if self.dtype == "f32":
            return self.array.astype("<f4").tobytes()
        if self.dtype == "i8":
            return self.array.tobytes()
        return pack4_rows(self.array)


def _decode(dtype: str, shape, raw: bytes) -> np.ndarray:
    if dtype == "f32":
        return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    if dtype == "i8":
        return np.frombuffer(raw, dtype=np.int8).reshape(shape).copy()
    return unpack4_rows(raw, shape)


@dataclass
class Container:
    kind: str
    model_config: dict[str, Any]
    tensors: dict[str, StoredTensor]
    recipe: dict[str, Any] | None = None


def _manifest(c: Container):
    entries, chunks, pos = [], [], 0
    for name in sorted(c.tensors):
        t = c.tensors[name]
        raw = t.encode()
        start = _align(pos)
        if start > pos:
            chunks.append(b"\0" * (start - pos))
        entries.append(
            {"name": name, "dtype": t.dtype, "shape": list(t.array.shape), "byte_offset": start, "byte_length": len(raw)}
        )
        chunks.append(raw)
        pos = start + len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": c.kind,
        "model_config": c.model_config,
        "tensors": entries,
        "payload_length": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    if c.recipe is not None:
        manifest["recipe"] = c.recipe
    return manifest, payload


def encode_container(c: Container) -> bytes:
    manifest, payload = _manifest(c)
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
    head = HEADER.pack(MAGIC, FORMAT_VERSION, len(mbytes), hashlib.sha256(mbytes).digest()) + mbytes
    return head + b"\0" * (_align(len(head)) - len(head)) + payload


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix="." + path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_container(path, c: Container) -> None:
    atomic_write(path, encode_container(c))


def _is_count(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool) and v >= 0


def _check_entry(e, payload_length: int) -> None:
    if not isinstance(e, dict):
        raise ManifestError("tensors: entries must be objects")
    if set(e) != ENTRY_KEYS:
        raise ManifestError(f"tensors: entry fields {sorted(set(e) ^ ENTRY_KEYS)} unexpected or missing")
    name = e["name"]
    if not isinstance(name, str) or not name:
        raise ManifestError("tensors.name: must be a non-empty string")
    if e["dtype"] not in DTYPES:
        raise ManifestError(f"tensors[{name}].dtype: unknown dtype {e['dtype']!r}")
    shape = e["shape"]
    if not isinstance(shape, list) or not all(_is_count(d) for d in shape):
        raise ManifestError(f"tensors[{name}].shape: must be a list of non-negative integers")
    for key in ("byte_offset", "byte_length"):
        if not _is_count(e[key]):
            raise ManifestError(f"tensors[{name}].{key}: must be a non-negative integer")
    if e["byte_length"] != _byte_length(e["dtype"], shape):
        raise LayoutError(f"tensors[{name}].byte_length: {e['byte_length']} does not match dtype and shape")
    if e["byte_offset"] % ALIGN:
        raise LayoutError(f"tensors[{name}].byte_offset: {e['byte_offset']} is not {ALIGN}-byte aligned")
    if e["byte_offset"] + e["byte_length"] > payload_length:
        raise LayoutError(f"tensors[{name}]: range ends beyond the payload")


def decode_container(data: bytes) -> Container:
    """Parse and fully validate a container image."""
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise BadMagicError("not an FPTQ container (bad magic)")
    if len(data) < HEADER.size:
        raise TruncatedError("file ends inside the header")
    _, version, mlen, mhash = HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    if HEADER.size + mlen > len(data):
        raise TruncatedError("file ends inside the manifest")
    mbytes = data[HEADER.size : HEADER.size + mlen]
    if hashlib.sha256(mbytes).digest() != mhash:
        raise ChecksumError("manifest checksum mismatch")
    try:
        m = json.loads(mbytes.decode("utf-8"), parse_constant=_reject_constant)
    except (UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(m, dict):
        raise ManifestError("manifest must be an object")
    unknown = set(m) - MANIFEST_KEYS
    if unknown:
        raise ManifestError(f"{min(unknown)}: unknown manifest field")
    for key in MANIFEST_KEYS - {"recipe"}:
        if key not in m:
            raise ManifestError(f"{key}: missing manifest field")
    if m["format_version"] != version:
        raise VersionError("manifest and header disagree on the format version")
    if not isinstance(m["kind"], str):
        raise ManifestError("kind: must be a string")
    if not isinstance(m["model_config"], dict):
        raise ManifestError("model_config: must be an object")
    if not _is_count(m["payload_length"]):
        raise ManifestError("payload_length: must be a non-negative integer")
    if not isinstance(m["tensors"], list):
        raise ManifestError("tensors: must be a list")
    start = _align(HEADER.size + mlen)
    plen = m["payload_length"]
    if len(data) < start + plen:
        raise TruncatedError(f"payload truncated ({max(0, len(data) - start)} of {plen} bytes)")
    if len(data) > start + plen:
        raise LayoutError("trailing bytes after the payload")
    if any(data[HEADER.size + mlen : start]):
        raise LayoutError("non-zero header padding")
    names = set()
    for e in m["tensors"]:
        _check_entry(e, plen)
        if e["name"] in names:
            raise ManifestError(f"tensors[{e['name']}]: duplicate name")
        names.add(e["name"])
    spans = sorted((e["byte_offset"], e["byte_offset"] + e["byte_length"], e["name"]) for e in m["tensors"])
    for (_, end_a, a), (start_b, _, b) in pairwise(spans):
        if start_b < end_a:
            raise OverlapError(f"tensors {a} and {b} overlap")
    payload = data[start:]
    if hashlib.sha256(payload).hexdigest() != m["payload_sha256"]:
        raise ChecksumError("payload checksum mismatch")
    tensors = {}
    for e in m["tensors"]:
        raw = payload[e["byte_offset"] : e["byte_offset"] + e["byte_length"]]
        tensors[e["name"]] = StoredTensor(e["dtype"], _decode(e["dtype"], tuple(e["shape"]), raw))
    return Container(m["kind"], m["model_config"], tensors, m.get("recipe"))


def _reject_constant(name):
    raise ValueError(f"non-finite number {name} in manifest")


def read_container(path) -> Container:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return decode_container(data)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tensor_table(c: Container) -> Mapping[str, tuple]:
    return {name: (t.dtype, t.array.shape) for name, t in c.tensors.items()}
