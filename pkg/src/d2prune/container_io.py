"""The D2PW binary tensor container and u32 token-stream files.

Layout (all integers little-endian):

    magic          4 bytes, b"D2PW"
    version        u32 (currently 1)
    metadata       u32 byte length, then UTF-8 "key=value" lines
    tensor record  (repeated until EOF)
        name       u32 byte length, UTF-8
        rank       u32
        dims       u64 per axis
        data       row-major float32

The format is bit-exact and language-neutral: writing the same named float32
arrays twice produces identical bytes. Besides model weights it carries
calibration-statistic caches, masks, saliency matrices and attention
surfaces, distinguished by the metadata ``kind`` line.
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

from .errors import (
    BadMagicError,
    MetadataError,
    TruncatedTensorError,
    VersionError,
)

MAGIC = b"D2PW"
FORMAT_VERSION = 1

_MAX_NAME_BYTES = 1 << 20
_MAX_META_BYTES = 1 << 24
_MAX_RANK = 8

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "write_tensor_file",
    "read_tensor_file",
    "write_tokens",
    "read_tokens",
]


def write_tensor_file(path, metadata: Mapping[str, str], tensors: Mapping[str, np.ndarray]) -> None:
    """Write tensors in insertion order; values are stored as float32."""
    meta_text = "".join(f"{k}={v}\n" for k, v in metadata.items())
    meta_bytes = meta_text.encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        for name, arr in tensors.items():
            a = np.ascontiguousarray(arr, dtype="<f4")
            name_bytes = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<I", a.ndim))
            for d in a.shape:
                f.write(struct.pack("<Q", d))
            f.write(a.tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TruncatedTensorError(f"file ends inside {what} (wanted {n} bytes, got {len(data)})")
    return data


def read_tensor_file(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Read a D2PW file back as (metadata, name -> float32 array)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        raw = f.read(4)
        if len(raw) != 4:
            raise TruncatedTensorError("file ends inside the version field")
        (version,) = struct.unpack("<I", raw)
        if version != FORMAT_VERSION:
            raise VersionError(f"unsupported format version {version}, expected {FORMAT_VERSION}")
        raw = f.read(4)
        if len(raw) != 4:
            raise TruncatedTensorError("file ends inside the metadata length field")
        (meta_len,) = struct.unpack("<I", raw)
        if meta_len > _MAX_META_BYTES:
            raise MetadataError(f"metadata block implausibly large ({meta_len} bytes)")
        meta_bytes = f.read(meta_len)
        if len(meta_bytes) != meta_len:
            raise MetadataError("file ends inside the metadata block")
        metadata = _parse_metadata(meta_bytes)

        tensors: dict[str, np.ndarray] = {}
        while True:
            raw = f.read(4)
            if len(raw) == 0:
                break
            if len(raw) != 4:
                raise TruncatedTensorError("file ends inside a tensor name length field")
            (name_len,) = struct.unpack("<I", raw)
            if name_len == 0 or name_len > _MAX_NAME_BYTES:
                raise MetadataError(f"invalid tensor name length {name_len}")
            name_bytes = _read_exact(f, name_len, "a tensor name")
            try:
                name = name_bytes.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise MetadataError(f"tensor name is not valid UTF-8: {exc}") from exc
            if name in tensors:
                raise MetadataError(f"duplicate tensor name {name!r}")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, f"tensor {name!r} rank"))
            if rank > _MAX_RANK:
                raise MetadataError(f"tensor {name!r} has implausible rank {rank}")
            dims = []
            for _ in range(rank):
                (d,) = struct.unpack("<Q", _read_exact(f, 8, f"tensor {name!r} dims"))
                dims.append(int(d))
            n_elem = 1
            for d in dims:
                n_elem *= d
            data = f.read(n_elem * 4)
            if len(data) != n_elem * 4:
                raise TruncatedTensorError(
                    f"tensor {name!r} truncated: wanted {n_elem * 4} data bytes, got {len(data)}"
                )
            tensors[name] = np.frombuffer(data, dtype="<f4").reshape(dims).copy()
    return metadata, tensors


def _parse_metadata(meta_bytes: bytes) -> dict[str, str]:
    try:
        text = meta_bytes.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MetadataError(f"metadata is not valid UTF-8: {exc}") from exc
    metadata: dict[str, str] = {}
    for line in text.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise MetadataError(f"metadata line without '=': {line!r}")
        key, value = line.split("=", 1)
        if key in metadata:
            raise MetadataError(f"duplicate metadata key {key!r}")
        metadata[key] = value
    return metadata


def write_tokens(path, tokens) -> None:
    """Write a token-id sequence as little-endian u32."""
    arr = np.asarray(tokens, dtype="<u4")
    with open(path, "wb") as f:
        f.write(arr.tobytes())


def read_tokens(path) -> np.ndarray:
    """Read a little-endian u32 token-id file as int64 ids."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) % 4 != 0:
        raise TruncatedTensorError(f"token stream length {len(data)} is not a multiple of 4")
    return np.frombuffer(data, dtype="<u4").astype(np.int64)
