"""Flat binary array files and checksummed JSON manifests.

Array file layout (little-endian)::

    8 bytes  magic  b"BEVDARR\\0"
    u32      format version
    u32      dtype code (0 = f32, 1 = f64, 2 = i64)
    u32      ndim
    u32*ndim extents
    payload  row-major values

Manifests list every file with its SHA-256, so a truncated or edited file is
rejected before anything is parsed.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"BEVDARR\x00"
ARRAY_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class DatasetError(Exception):
    """Base class for on-disk format failures."""


class ChecksumError(DatasetError):
    pass


class VersionError(DatasetError):
    pass


class FormatError(DatasetError):
    pass


def encode_array(arr: np.ndarray, dtype: str = "f4") -> bytes:
    dt = np.dtype(dtype).newbyteorder("<")
    code = _CODES[dt]
    a = np.asarray(arr, dtype=dt, order="C")
    header = MAGIC + struct.pack("<III", ARRAY_VERSION, code, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + a.tobytes()


def decode_array(buf: bytes) -> np.ndarray:
    if len(buf) < 20 or buf[:8] != MAGIC:
        raise FormatError("bad magic")
    version, code, ndim = struct.unpack_from("<III", buf, 8)
    if version != ARRAY_VERSION:
        raise VersionError(f"array format version {version}, expected {ARRAY_VERSION}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    off = 20 + 4 * ndim
    if len(buf) < off:
        raise FormatError("truncated header")
    shape = struct.unpack_from(f"<{ndim}I", buf, 20)
    dt = _DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) - off != expected:
        raise FormatError(f"payload is {len(buf) - off} bytes, expected {expected}")
    return np.frombuffer(buf, dtype=dt, offset=off).reshape(shape).copy()


def sha256_bytes(buf: bytes) -> str:
    return hashlib.sha256(buf).hexdigest()


def write_array(path: Path, arr: np.ndarray, dtype: str = "f4") -> str:
    """Write one array; returns its checksum."""
    buf = encode_array(arr, dtype)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf)
    return sha256_bytes(buf)


def read_array(path: Path, checksum: str | None = None) -> np.ndarray:
    buf = Path(path).read_bytes()
    if checksum is not None and sha256_bytes(buf) != checksum:
        raise ChecksumError(f"checksum mismatch for {path}")
    return decode_array(buf)


def write_manifest(path: Path, manifest: dict) -> None:
    """Atomic JSON write with sorted keys (byte-identical for identical content)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_manifest(path: Path, kind: str, version: int) -> dict:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing manifest {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"unparseable manifest {path}: {exc}") from exc
    if manifest.get("kind") != kind:
        raise FormatError(f"{path} is not a {kind} manifest")
    if manifest.get("version") != version:
        raise VersionError(f"{kind} manifest version {manifest.get('version')}, expected {version}")
    return manifest


def write_array_set(root: Path, arrays: dict[str, tuple[np.ndarray, str]]) -> dict[str, str]:
    """Write ``{relpath: (array, dtype)}`` under ``root``; returns relpath → checksum."""
    return {rel: write_array(root / rel, arr, dt) for rel, (arr, dt) in sorted(arrays.items())}


def verify_files(root: Path, checksums: dict[str, str]) -> None:
    """Check every listed file before any of them is used."""
    for rel, digest in checksums.items():
        p = root / rel
        if not p.exists():
            raise DatasetError(f"missing file {rel}")
        if sha256_bytes(p.read_bytes()) != digest:
            raise ChecksumError(f"checksum mismatch for {rel}")
