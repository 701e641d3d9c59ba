"""TSBA tensor container: named little-endian float32 arrays.

Layout: ``b"TSBA"``, u32 version (1), u32 tensor count, then per tensor
u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims, float32 data.
"""

import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError, VersionError

MAGIC = b"TSBA"
VERSION = 1


def encode_tensors(tensors):
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_tensors(blob):
    def need(pos, n, what):
        if pos + n > len(blob):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=pos)

    need(0, 4, "magic")
    if blob[:4] != MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    need(4, 8, "header")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}", offset=4)
    pos = 12
    out = {}
    for _ in range(count):
        need(pos, 2, "name length")
        (n,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        need(pos, n, "name")
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        need(pos, 1, "ndim")
        ndim = blob[pos]
        pos += 1
        need(pos, 4 * ndim, "dims")
        dims = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        size = int(np.prod(dims)) if ndim else 1
        need(pos, 4 * size, f"data of {name}")
        out[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
        pos += 4 * size
    if pos != len(blob):
        raise FormatError("trailing bytes after last tensor", offset=pos)
    return out


def save_tensors(path, tensors):
    Path(path).write_bytes(encode_tensors(tensors))


def load_tensors(path):
    return decode_tensors(Path(path).read_bytes())
