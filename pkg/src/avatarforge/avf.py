"""AVF1 binary container: named numpy sections in one little-endian file.

Layout (all integers little-endian):
    magic    4 bytes  b"AVF1"
    version  u32      currently 1
    count    u32      number of sections
    then per section:
        name_len   u16, name utf-8 bytes
        dtype_len  u16, numpy dtype string (e.g. "<f8")
        ndim       u32
        shape      ndim * u64
        nbytes     u64
        data       raw C-order array bytes

Head models and dynamic-texture network weights both serialize through this
container; they are distinguished purely by their section name prefixes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

MAGIC = b"AVF1"
VERSION = 1


def write_container(path, sections: dict[str, np.ndarray]) -> None:
    path = Path(path)
    blobs = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for name in sorted(sections):
        arr = np.ascontiguousarray(sections[name])
        name_b = name.encode("utf-8")
        dtype_b = arr.dtype.str.encode("ascii")
        blobs.append(struct.pack("<H", len(name_b)))
        blobs.append(name_b)
        blobs.append(struct.pack("<H", len(dtype_b)))
        blobs.append(dtype_b)
        blobs.append(struct.pack("<I", arr.ndim))
        blobs.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        raw = arr.tobytes()
        blobs.append(struct.pack("<Q", len(raw)))
        blobs.append(raw)
    path.write_bytes(b"".join(blobs))


def read_container(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise InvalidInputError(f"{path}: not an AVF1 container")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise InvalidInputError(f"{path}: unsupported AVF version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + name_len].decode("utf-8")
        off += name_len
        (dtype_len,) = struct.unpack_from("<H", data, off)
        off += 2
        dtype = np.dtype(data[off:off + dtype_len].decode("ascii"))
        off += dtype_len
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        (nbytes,) = struct.unpack_from("<Q", data, off)
        off += 8
        arr = np.frombuffer(data[off:off + nbytes], dtype=dtype).reshape(shape)
        off += nbytes
        out[name] = arr.copy()
    return out
