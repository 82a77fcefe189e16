"""Little-endian binary container shared by checkpoints and COO artifacts.

Layout (all integers little-endian)::

    magic        8 bytes
    version      u32
    header_len   u32
    header       header_len bytes, UTF-8 JSON; "arrays" lists {name, dtype, shape}
    payload      each array's raw bytes, in header order, no padding
    crc32        u32 over every preceding byte

Only ``<f8`` and ``<u4`` arrays are used. See docs/FORMATS.md.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

_DTYPES = {"<f8": np.dtype("<f8"), "<u4": np.dtype("<u4")}


class FormatError(ValueError):
    """Bad magic, unsupported version, checksum failure or malformed content."""


def write_container(path, magic: bytes, version: int, header: dict, arrays: list[tuple[str, np.ndarray]]) -> int:
    """Write atomically; returns the file size in bytes."""
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    table, blobs = [], []
    for name, arr in arrays:
        arr = np.asarray(arr)
        code = "<u4" if arr.dtype.kind in "ui" else "<f8"
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        table.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = dict(header, arrays=table)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = magic + struct.pack("<II", version, len(hbytes)) + hbytes + b"".join(blobs)
    data = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return len(data)


def read_container(path, magic: bytes, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < 20:
        raise FormatError(f"{path}: file too short")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError(f"{path}: checksum mismatch (truncated or corrupted)")
    if body[:8] != magic:
        raise FormatError(f"{path}: bad magic {body[:8]!r}")
    ver, hlen = struct.unpack("<II", body[8:16])
    if ver != version:
        raise FormatError(f"{path}: unsupported version {ver} (expected {version})")
    try:
        header = json.loads(body[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header") from exc
    arrays, pos = {}, 16 + hlen
    for entry in header.get("arrays", []):
        dt = _DTYPES.get(entry["dtype"])
        if dt is None:
            raise FormatError(f"{path}: unsupported dtype {entry['dtype']}")
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(body):
            raise FormatError(f"{path}: payload shorter than declared")
        arrays[entry["name"]] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize,
                                              offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(body):
        raise FormatError(f"{path}: {len(body) - pos} trailing payload bytes")
    return header, arrays
