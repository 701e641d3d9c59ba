import json

import numpy as np
import pytest

from brickforge.cli import main
from brickforge.fileio import read_pgm, read_voxels, write_pgm, write_voxels

TINY_CFG = """\
feature_dim = 16
enc_layers = 1
dec_layers = 1
heads = 2
mlp_dim = 32
image_size = 16
patch_size = 8
grid = 16
max_bricks = 8
epochs = 1
batch_size = 4
"""


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def workspace(tmp_path, capsys):
    (tmp_path / "tiny.cfg").write_text(TINY_CFG)
    code, out, _ = run(capsys, "gen-rad", "--count", "4", "--bricks", "3", "--grid", "16",
                       "--seed", "2", "--out", str(tmp_path / "rad"))
    assert code == 0 and json.loads(out)["records"] == 4
    code, _, _ = run(capsys, "pretrain", "--data", str(tmp_path / "rad"), "--out",
                     str(tmp_path / "m.tsba"), "--config", str(tmp_path / "tiny.cfg"))
    assert code == 0
    return tmp_path


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert out.startswith("brickforge ") and "(" in out


def test_bad_flags_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen-rad", "--count", "x", "--out", "o"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["nonsense"])
    assert exc.value.code == 2


def test_runtime_error_exit_1(tmp_path, capsys):
    code, _, err = run(capsys, "render", "--voxels", str(tmp_path / "missing.voxl"),
                       "--out-prefix", str(tmp_path / "v"))
    assert code == 1
    assert set(json.loads(err.strip().splitlines()[-1])) == {"error", "message"}


def test_gen_rad_is_reproducible(tmp_path, capsys):
    for name in ("a", "b"):
        run(capsys, "gen-rad", "--count", "3", "--bricks", "5", "--seed", "7", "--out", str(tmp_path / name))
    assert (tmp_path / "a" / "manifest.jsonl").read_bytes() == (tmp_path / "b" / "manifest.jsonl").read_bytes()


def test_render_and_ingest(tmp_path, capsys):
    grid = np.zeros((16, 16, 16), dtype=np.uint8)
    grid[2:4, 5:9, 1:3] = 1
    write_voxels(tmp_path / "g.voxl", grid)
    code, out, _ = run(capsys, "render", "--voxels", str(tmp_path / "g.voxl"), "--out-prefix",
                       str(tmp_path / "sil"))
    assert code == 0
    names = json.loads(out)["silhouettes"]
    assert len(names) == 3 and read_pgm(names[2]).sum() == 8

    img = np.zeros((16, 16))
    img[4:10, 6:9] = 1
    write_pgm(tmp_path / "glyph.pgm", img)
    code, out, _ = run(capsys, "ingest-image", "--in", str(tmp_path / "glyph.pgm"), "--grid", "16",
                       "--depth", "2", "--out", str(tmp_path / "ing"))
    assert code == 0 and json.loads(out)["voxels"] == 6 * 3 * 2


def test_pretrain_selftrain_assemble_eval(workspace, capsys):
    w = workspace
    code, out, _ = run(capsys, "selftrain", "--ckpt", str(w / "m.tsba"), "--data", str(w / "rad"),
                       "--out", str(w / "s.tsba"), "--epochs", "1", "--batch-size", "4")
    assert code == 0 and json.loads(out)["epochs"] == 2

    code, out, _ = run(capsys, "assemble", "--ckpt", str(w / "s.tsba"), "--data", str(w / "rad"),
                       "--out", str(w / "pred"))
    assert code == 0 and json.loads(out)["records"] == 4

    code, out, _ = run(capsys, "eval", "--pred", str(w / "pred"), "--gt", str(w / "rad"),
                       "--per-class", "--ckpt", str(w / "m.tsba"), "--out", str(w / "r.json"))
    assert code == 0
    report = json.loads(out)
    assert 0 <= report["iou_mean"] <= 1 and report["legality"] == 1.0
    assert 0 <= report["acc"] <= 1 and 0 <= report["connection_acc"] <= 1
    assert "rad" in report["per_class"]
    assert json.loads((w / "r.json").read_text()) == report


def test_assemble_single_and_inspect(workspace, capsys):
    w = workspace
    grid = np.zeros((16, 16, 16), dtype=np.uint8)
    grid[8, 8:12, 8:10] = 1
    from brickforge.datagen import render_silhouettes

    paths = []
    for v, img in enumerate(render_silhouettes(grid)):
        paths.append(str(w / f"v{v}.pgm"))
        write_pgm(paths[-1], img)
    code, out, _ = run(capsys, "assemble", "--ckpt", str(w / "m.tsba"), "--images", *paths,
                       "--out-voxels", str(w / "a.voxl"), "--out-actions", str(w / "a.json"))
    assert code == 0
    n = json.loads(out)["bricks"]
    assert read_voxels(w / "a.voxl").sum() == 8 * n
    doc = json.loads((w / "a.json").read_text())
    assert len(doc["actions"]) == n == len(doc["probs"])

    code, out, _ = run(capsys, "inspect", "--actions", str(w / "a.json"))
    assert code == 0
    lines = out.strip().splitlines()
    assert len(lines) == n and lines[0].startswith("[0] pose=(8,8,8,r0)")

    code, _, _ = run(capsys, "assemble", "--ckpt", str(w / "m.tsba"), "--images", paths[0])
    assert code == 1


def test_inspect_nested_output(tmp_path, capsys):
    doc = {"grid": 32, "actions": [[[3], []], [[], []]]}
    (tmp_path / "a.json").write_text(json.dumps(doc))
    code, out, _ = run(capsys, "inspect", "--actions", str(tmp_path / "a.json"))
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0] == "[0] pose=(16,16,16,r0) depth=0 root"
    assert lines[1] == "  [1] pose=(16,16,17,r0) depth=1 up t3 (dx=0, dy=0, rot=0) from 0"
