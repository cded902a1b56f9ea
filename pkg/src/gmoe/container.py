"""Self-checking binary container shared by datasets (GMDS) and checkpoints (GMCK).

Layout::

    magic            8 bytes, e.g. b"GMDS0001"
    header length    uint32 little-endian
    header           UTF-8 JSON: {"meta": {...}, "arrays": [{name, dtype, shape, offset, nbytes}]}
    array payload    raw little-endian buffers; offsets are relative to the payload start
    crc32            uint32 little-endian over every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

DATASET_MAGIC = b"GMDS0001"
CHECKPOINT_MAGIC = b"GMCK0001"


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">" or (arr.dtype.byteorder == "=" and not np.little_endian):
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def encode(magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    directory, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = _le(np.asarray(arr))
        buf = arr.tobytes()
        directory.append({"name": name, "dtype": arr.dtype.newbyteorder("<").str,
                          "shape": list(arr.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    header = json.dumps({"meta": meta, "arrays": directory}, sort_keys=True).encode("utf-8")
    body = magic + struct.pack("<I", len(header)) + header + b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(blob: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 8 or blob[:8] != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {blob[:8]!r}")
    if len(blob) < 16:
        raise TruncatedError("file too short for header length and checksum")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if 12 + hlen + 4 > len(blob):
        raise TruncatedError("header extends past end of file")
    (stored,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored:
        raise ChecksumError("CRC32 mismatch; file is corrupted")
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    payload = blob[12 + hlen:-4]
    arrays = {}
    for entry in header["arrays"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload):
            raise TruncatedError(f"array {entry['name']} extends past payload")
        arr = np.frombuffer(payload[start:start + n], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header["meta"], arrays


def write(path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(magic, meta, arrays))


def read(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), magic)
