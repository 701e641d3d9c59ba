"""Binary voxel (VOXL) and PGM image readers/writers."""

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ParseError, VersionError

VOXL_MAGIC = b"VOXL"
VOXL_VERSION = 1


def encode_voxels(grid):
    grid = np.asarray(grid)
    if grid.ndim != 3 or len(set(grid.shape)) != 1:
        raise ValueError(f"expected a cubic grid, got shape {grid.shape}")
    S = grid.shape[0]
    bits = np.packbits((grid.reshape(-1) > 0).astype(np.uint8), bitorder="little")
    return VOXL_MAGIC + struct.pack("<II", VOXL_VERSION, S) + bits.tobytes()


def decode_voxels(blob):
    if len(blob) < 4 or blob[:4] != VOXL_MAGIC:
        raise FormatError("bad VOXL magic", offset=0)
    if len(blob) < 12:
        raise FormatError("truncated VOXL header", offset=len(blob))
    version, S = struct.unpack_from("<II", blob, 4)
    if version != VOXL_VERSION:
        raise VersionError(f"unsupported VOXL version {version}", offset=4)
    n = S ** 3
    nbytes = (n + 7) // 8
    if len(blob) < 12 + nbytes:
        raise FormatError(f"truncated VOXL payload, expected {nbytes} bytes", offset=len(blob))
    bits = np.frombuffer(blob, dtype=np.uint8, count=nbytes, offset=12)
    cells = np.unpackbits(bits, bitorder="little")[:n]
    return cells.reshape(S, S, S).astype(np.uint8)


def write_voxels(path, grid):
    Path(path).write_bytes(encode_voxels(grid))


def read_voxels(path):
    return decode_voxels(Path(path).read_bytes())


def write_pgm(path, image):
    """Write a [0, 1] image as binary PGM (P5, maxval 255)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {img.shape}")
    pixels = np.rint(255.0 * np.clip(img, 0.0, 1.0)).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes())


def _pgm_tokens(blob, count, pos):
    tokens = []
    while len(tokens) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated PGM header")
        tokens.append(blob[start:pos])
    return tokens, pos


def read_pgm(path):
    """Read P5/P2 PGM into a float array in [0, 1]."""
    blob = Path(path).read_bytes()
    magic = blob[:2]
    if magic not in (b"P5", b"P2"):
        raise ParseError(f"{path}: not a PGM file")
    (w, h, maxval), pos = _pgm_tokens(blob, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if magic == b"P5":
        pos += 1
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        size = w * h * np.dtype(dtype).itemsize
        if len(blob) < pos + size:
            raise ParseError(f"{path}: truncated PGM payload")
        data = np.frombuffer(blob, dtype=dtype, count=w * h, offset=pos)
    else:
        data = np.array(blob[pos:].split()[: w * h], dtype=np.int64)
        if data.size != w * h:
            raise ParseError(f"{path}: truncated PGM payload")
    return data.reshape(h, w).astype(np.float64) / maxval


def read_image(path):
    """Grayscale image in [0, 1]; PGM natively, .npy, anything else via Pillow."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".pnm"):
        return read_pgm(path)
    if suffix == ".npy":
        arr = np.load(path).astype(np.float64)
        return arr / 255.0 if arr.max(initial=0) > 1.0 else arr
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
