"""Binary container shared by weight files and tensor dumps.

Layout::

    b"DNCW"                 magic
    u16 little-endian       format version
    u32 little-endian       header length in bytes
    header                  UTF-8 JSON, sorted keys
    payload                 little-endian float64 arrays, in header order
    u32 little-endian       CRC32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"DNCW"
VERSION = 1


class BlobError(ValueError):
    pass


def _plain(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False, default=_plain)


def encode(header: dict, arrays: list[np.ndarray]) -> bytes:
    header = dict(header)
    header["arrays"] = [list(np.shape(a)) for a in arrays]
    head = canonical_json(header).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(head)), head]
    for a in arrays:
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(data: bytes) -> tuple[dict, list[np.ndarray]]:
    if len(data) < 14 or data[:4] != MAGIC:
        raise BlobError("not a DNCW file (bad magic)")
    version, hlen = struct.unpack("<HI", data[4:10])
    if version != VERSION:
        raise BlobError(f"unsupported DNCW version {version}, expected {VERSION}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise BlobError("DNCW checksum mismatch")
    header = json.loads(body[10:10 + hlen].decode("utf-8"))
    offset = 10 + hlen
    arrays = []
    for shape in header.pop("arrays"):
        n = int(np.prod(shape)) if shape else 1
        end = offset + 8 * n
        if end > len(body):
            raise BlobError("DNCW payload truncated")
        arrays.append(np.frombuffer(body[offset:end], dtype="<f8").astype(np.float64).reshape(shape))
        offset = end
    if offset != len(body):
        raise BlobError("DNCW payload has trailing bytes")
    return header, arrays


def write(path, header: dict, arrays: list[np.ndarray]) -> None:
    Path(path).write_bytes(encode(header, arrays))


def read(path) -> tuple[dict, list[np.ndarray]]:
    return decode(Path(path).read_bytes())


def write_tensor(path, tensor: np.ndarray, **meta) -> None:
    write(path, {"kind": "tensor", **meta}, [np.asarray(tensor, np.float64)])


def read_tensor(path) -> np.ndarray:
    header, arrays = read(path)
    if header.get("kind") != "tensor" or len(arrays) != 1:
        raise BlobError("file does not hold a single tensor")
    return arrays[0]
