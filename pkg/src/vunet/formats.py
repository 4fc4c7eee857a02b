"""Binary file formats. Byte layouts are documented in docs/FORMATS.md.

* Tensor blob (``.f32`` / ``.mask``): magic ``VW4C``, u32 version, u32 kind,
  u32 ndim, ndim x u64 extents, payload, u32 CRC32 of everything before it.
* Container (``.ckpt``): magic ``VUNC``, u32 version, u64 manifest length,
  UTF-8 JSON manifest, u32 CRC32 of the manifest, then float64 blobs whose
  offsets, shapes and CRC32s are listed in the manifest.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ChecksumError, MissingFileError, TruncatedFileError, ValidationError, VersionError

BLOB_MAGIC = b"VW4C"
BLOB_VERSION = 1
KIND_FLOAT32 = 0
KIND_MASK = 1

CONTAINER_MAGIC = b"VUNC"
CONTAINER_VERSION = 1


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def encode_blob(array: np.ndarray, kind: int = KIND_FLOAT32) -> bytes:
    array = np.asarray(array)
    header = BLOB_MAGIC + struct.pack("<III", BLOB_VERSION, kind, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    if kind == KIND_FLOAT32:
        payload = np.ascontiguousarray(array, dtype="<f4").tobytes()
    elif kind == KIND_MASK:
        payload = np.packbits(np.ascontiguousarray(array, dtype=bool).ravel(), bitorder="little").tobytes()
    else:
        raise ValueError(f"unknown blob kind {kind}")
    body = header + payload
    return body + struct.pack("<I", zlib.crc32(body))


def decode_blob(data: bytes, path="<bytes>", expected_kind: int | None = None,
                expected_shape: tuple | None = None) -> np.ndarray:
    if len(data) < 20:
        raise TruncatedFileError(f"{path}: {len(data)} bytes is too short for a blob header")
    if data[:4] != BLOB_MAGIC:
        raise ValidationError(f"{path}: bad magic {data[:4]!r}")
    version, kind, ndim = struct.unpack_from("<III", data, 4)
    if version != BLOB_VERSION:
        raise VersionError(f"{path}: blob version {version}, expected {BLOB_VERSION}")
    head_len = 16 + 8 * ndim
    if len(data) < head_len + 4:
        raise TruncatedFileError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{ndim}Q", data, 16)
    n = int(np.prod(shape)) if ndim else 1
    if kind == KIND_FLOAT32:
        payload_len = 4 * n
    elif kind == KIND_MASK:
        payload_len = (n + 7) // 8
    else:
        raise ValidationError(f"{path}: unknown blob kind {kind}")
    if len(data) != head_len + payload_len + 4:
        if len(data) < head_len + payload_len + 4:
            raise TruncatedFileError(f"{path}: expected {head_len + payload_len + 4} bytes, found {len(data)}")
        raise ValidationError(f"{path}: {len(data) - head_len - payload_len - 4} trailing bytes")
    (stored_crc,) = struct.unpack_from("<I", data, head_len + payload_len)
    actual = zlib.crc32(data[:head_len + payload_len])
    if stored_crc != actual:
        raise ChecksumError(path, stored_crc, actual)
    if expected_kind is not None and kind != expected_kind:
        raise ValidationError(f"{path}: blob kind {kind}, expected {expected_kind}")
    if expected_shape is not None and tuple(shape) != tuple(expected_shape):
        raise ValidationError(f"{path}: blob shape {tuple(shape)} does not match declared {tuple(expected_shape)}")
    payload = data[head_len:head_len + payload_len]
    if kind == KIND_FLOAT32:
        return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=n, bitorder="little")
    return bits.astype(bool).reshape(shape)


def write_blob(path, array, kind: int = KIND_FLOAT32) -> int:
    """Write a blob file; returns the CRC32 stored in its trailer."""
    data = encode_blob(array, kind)
    _atomic_write(Path(path), data)
    return struct.unpack("<I", data[-4:])[0]


def read_blob(path, expected_kind=None, expected_shape=None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"missing tensor file {path}")
    return decode_blob(path.read_bytes(), path, expected_kind, expected_shape)


def write_container(path, meta: dict, arrays: dict) -> None:
    """Write ``meta`` (JSON-serializable) plus named float64 arrays to one file."""
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                        "nbytes": len(raw), "crc32": zlib.crc32(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta, "entries": entries}, sort_keys=True).encode("utf-8")
    head = CONTAINER_MAGIC + struct.pack("<IQ", CONTAINER_VERSION, len(manifest))
    data = head + manifest + struct.pack("<I", zlib.crc32(manifest)) + b"".join(chunks)
    _atomic_write(Path(path), data)


def read_container(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"missing checkpoint {path}")
    data = path.read_bytes()
    if len(data) < 16:
        raise TruncatedFileError(f"{path}: {len(data)} bytes is too short for a container header")
    if data[:4] != CONTAINER_MAGIC:
        raise ValidationError(f"{path}: bad magic {data[:4]!r}")
    version, mlen = struct.unpack_from("<IQ", data, 4)
    if version != CONTAINER_VERSION:
        raise VersionError(f"{path}: container version {version}, expected {CONTAINER_VERSION}")
    start = 16
    if len(data) < start + mlen + 4:
        raise TruncatedFileError(f"{path}: manifest truncated")
    manifest = data[start:start + mlen]
    (crc,) = struct.unpack_from("<I", data, start + mlen)
    if zlib.crc32(manifest) != crc:
        raise ChecksumError(path, crc, zlib.crc32(manifest))
    doc = json.loads(manifest.decode("utf-8"))
    base = start + mlen + 4
    arrays = {}
    for e in doc["entries"]:
        lo = base + e["offset"]
        hi = lo + e["nbytes"]
        if hi > len(data):
            raise TruncatedFileError(f"{path}: blob {e['name']!r} truncated")
        raw = data[lo:hi]
        if zlib.crc32(raw) != e["crc32"]:
            raise ChecksumError(f"{path}:{e['name']}", e["crc32"], zlib.crc32(raw))
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).copy()
    if base + sum(e["nbytes"] for e in doc["entries"]) != len(data):
        raise ValidationError(f"{path}: unexpected trailing bytes")
    return doc["meta"], arrays
