"""Binary container: JSON header + raw little-endian float64 arrays.

Layout: a 4-byte little-endian unsigned header length, the UTF-8 JSON
header, then the arrays back to back. The header carries a magic string,
a format version, caller metadata, and per-array name/shape/offset
(offsets relative to the start of the data section). Round-trips are
bitwise exact.
"""

from __future__ import annotations

import json
import struct
from typing import Mapping

import numpy as np

from .errors import FormatError

VERSION = 1


def pack(magic: str, meta: dict, arrays: Mapping[str, np.ndarray]) -> bytes:
    """Serialize metadata and named float64 arrays."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    header = {
        "magic": magic,
        "version": VERSION,
        "meta": meta,
        "arrays": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(header_bytes)) + header_bytes + b"".join(blobs)


def unpack(blob: bytes, expected_magic: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a container; returns (meta, arrays). Raises FormatError."""
    if len(blob) < 4:
        raise FormatError("container shorter than the 4-byte header length")
    (header_len,) = struct.unpack("<I", blob[:4])
    if len(blob) < 4 + header_len:
        raise FormatError(
            f"truncated header: need {header_len} bytes, have {len(blob) - 4}"
        )
    try:
        header = json.loads(blob[4:4 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid JSON: {exc}") from exc
    magic = header.get("magic")
    if magic != expected_magic:
        raise FormatError(f"bad magic: expected {expected_magic!r}, got {magic!r}")
    version = header.get("version")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version!r} (expected {VERSION})")
    data = blob[4 + header_len:]
    arrays = {}
    for entry in header.get("arrays", []):
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * 8
        if end > len(data):
            raise FormatError(
                f"truncated data: array {name!r} needs bytes up to {end}, "
                f"data section has {len(data)}"
            )
        arrays[name] = np.frombuffer(
            data[offset:end], dtype="<f8"
        ).reshape(shape).copy()
    return header.get("meta", {}), arrays


def write(path, magic: str, meta: dict, arrays: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(pack(magic, meta, arrays))


def read(path, expected_magic: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return unpack(fh.read(), expected_magic)
