import numpy as np
import pytest

from brickforge.errors import FormatError, ParseError, VersionError
from brickforge.fileio import (
    decode_voxels,
    encode_voxels,
    read_image,
    read_pgm,
    read_voxels,
    write_pgm,
    write_voxels,
)


def test_voxl_bit_layout():
    grid = np.zeros((2, 2, 2), dtype=np.uint8)
    grid[0, 0, 1] = 1  # flat index 1
    grid[1, 1, 1] = 1  # flat index 7
    blob = encode_voxels(grid)
    assert blob[:4] == b"VOXL"
    assert blob[4:12] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert blob[12:] == bytes([0b10000010])


def test_voxl_round_trip(tmp_path, rng):
    grid = (rng.random((9, 9, 9)) < 0.3).astype(np.uint8)
    write_voxels(tmp_path / "g.voxl", grid)
    assert np.array_equal(read_voxels(tmp_path / "g.voxl"), grid)
    assert encode_voxels(read_voxels(tmp_path / "g.voxl")) == (tmp_path / "g.voxl").read_bytes()


def test_voxl_errors():
    blob = encode_voxels(np.ones((4, 4, 4)))
    with pytest.raises(FormatError):
        decode_voxels(b"NOPE" + blob[4:])
    with pytest.raises(FormatError) as exc:
        decode_voxels(blob[:-2])
    assert exc.value.offset == len(blob) - 2
    with pytest.raises(VersionError):
        decode_voxels(blob[:4] + (2).to_bytes(4, "little") + blob[8:])


def test_pgm_round_trip(tmp_path):
    img = np.array([[0.0, 1.0, 0.5], [0.25, 0.75, 1.0]])
    write_pgm(tmp_path / "a.pgm", img)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n3 2\n255\n")
    assert list(raw[-6:]) == [0, 255, 128, 64, 191, 255]
    back = read_pgm(tmp_path / "a.pgm")
    assert np.allclose(back, np.rint(img * 255) / 255)


def test_ascii_pgm_with_comment(tmp_path):
    (tmp_path / "b.pgm").write_bytes(b"P2\n# note\n2 1\n4\n0 4\n")
    assert np.array_equal(read_pgm(tmp_path / "b.pgm"), [[0.0, 1.0]])


def test_bad_pgm(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(ParseError):
        read_pgm(tmp_path / "c.pgm")
    (tmp_path / "d.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
    with pytest.raises(ParseError):
        read_pgm(tmp_path / "d.pgm")


def test_read_image_npy_and_png(tmp_path):
    arr = np.array([[0, 255], [128, 0]], dtype=np.uint8)
    np.save(tmp_path / "x.npy", arr)
    assert read_image(tmp_path / "x.npy")[0, 1] == 1.0
    pil = pytest.importorskip("PIL.Image")
    pil.fromarray(arr).save(tmp_path / "x.png")
    assert np.allclose(read_image(tmp_path / "x.png"), arr / 255.0)
