"""Synthetic assemblies, image extrusion, silhouette rendering and dataset files."""

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import _kernels
from .bricks import DOWN, Geometry, _unchecked_child, flat_cells
from .errors import DataError, GenerationStuck, ParseError, TooLarge
from .fileio import read_pgm, read_voxels, write_pgm, write_voxels
from .tree import LegoTree, bfs_tree, graph_from_bricks, validate_tree

log = logging.getLogger(__name__)

MANIFEST = "manifest.jsonl"
_MASK64 = (1 << 64) - 1


def _splitmix64(i):
    z = (i + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def record_seed(master, i):
    """Per-record seed; serial and parallel generation agree on it."""
    return (int(master) & _MASK64) ^ _splitmix64(int(i))


def record_rng(master, i):
    return np.random.default_rng(record_seed(master, i))


def generate_rad_object(n_bricks, geom=None, rng=None, allow_down=True):
    """Random connected assembly of ``n_bricks`` grown from a centred root."""
    geom = geom or Geometry()
    rng = rng if rng is not None else np.random.default_rng()
    if n_bricks < 1:
        raise ValueError("n_bricks must be >= 1")
    root = geom.root_pose
    poses = [root]
    flat = np.zeros(geom.n_cells, dtype=np.uint8)
    flat[flat_cells(root, geom)] = 1
    none_wanted = np.zeros(geom.n_slots, dtype=np.bool_)
    budget = 10 * n_bricks
    attempts = 0
    while len(poses) < n_bricks:
        if attempts >= budget:
            raise GenerationStuck(
                f"placed {len(poses)}/{n_bricks} bricks in {budget} attempts on a {geom.size}^3 grid"
            )
        attempts += 1
        p = poses[int(rng.integers(len(poses)))]
        legal, _ = _kernels.expand_brick(
            flat, geom.size, p.x, p.y, p.z, p.r,
            geom.slot_offsets, geom.cell_offsets, none_wanted, 0,
        )
        if not allow_down:
            legal[DOWN * geom.n_types:] = False
        options = np.flatnonzero(legal)
        if options.size == 0:
            continue
        t, d = geom.slot_to_edge(int(options[int(rng.integers(options.size))]))
        child = _unchecked_child(p, t, d)
        flat[flat_cells(child, geom)] = 1
        poses.append(child)
    return bfs_tree(graph_from_bricks(poses, geom), poses, 0, geom)


def _gen_one(args):
    i, n_bricks, size, seed, allow_down = args
    return generate_rad_object(n_bricks, Geometry(size), record_rng(seed, i), allow_down)


def generate_rad_set(count, n_bricks, geom=None, seed=0, allow_down=True, jobs=1):
    geom = geom or Geometry()
    work = [(i, n_bricks, geom.size, seed, allow_down) for i in range(count)]
    if jobs and jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(_gen_one, work, chunksize=16))
    return [_gen_one(w) for w in work]


# --------------------------------------------------------------------------
# images and silhouettes


def render_silhouettes(grid):
    """Three orthographic binary views ``[I_x, I_y, I_z]`` of a voxel grid.

    ``I_x[z', y]``, ``I_y[z', x]`` and ``I_z[y', x]`` with ``z' = S-1-z`` and
    ``y' = S-1-y`` so the top of the object is at the top of each image.
    """
    g = np.asarray(grid) > 0
    ix = g.any(axis=2)[::-1, :]
    iy = g.any(axis=1)[::-1, :]
    iz = g.any(axis=0)[::-1, :]
    return np.stack([ix, iy, iz]).astype(np.float32)


def slab_origin(geom, depth):
    """First y-layer of an extruded slab, centred on the root brick's y-span."""
    return geom.center + (geom.length - depth) // 2


def extrude_image(img, threshold=0.5, depth=2, geom=None):
    """Binarize a 2D image and extrude it ``depth`` cells along y.

    Columns map to x, rows to z (row 0 at the top); the image is centred
    in x/z and the slab sits on the root brick's y-span.
    """
    geom = geom or Geometry()
    S = geom.size
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {img.shape}")
    H, W = img.shape
    if depth < 1:
        raise ValueError("depth must be >= 1")
    y0 = slab_origin(geom, depth)
    if H > S or W > S or y0 < 0 or y0 + depth > S:
        raise TooLarge(f"{H}x{W} image with depth {depth} does not fit a {S}^3 grid")
    on = img >= threshold
    x0 = (S - W) // 2
    z0 = (S - H) // 2
    grid = np.zeros((S, S, S), dtype=np.uint8)
    rows, cols = np.nonzero(on)
    zs = z0 + (H - 1 - rows)
    xs = x0 + cols
    for y in range(y0, y0 + depth):
        grid[zs, y, xs] = 1
    return grid


def _seven_segment(digit):
    segs = {
        0: "abcdef", 1: "bc", 2: "abdeg", 3: "abcdg", 4: "bcfg",
        5: "acdfg", 6: "acdefg", 7: "abc", 8: "abcdefg", 9: "abcdfg",
    }
    return segs[digit]


def digit_glyph(digit, rng, size=32):
    """A thick seven-segment digit on a ``size`` x ``size`` canvas.

    Vertical strokes are 3-4 pixels wide and horizontal strokes 1-2 tall
    so 2x4 bricks laid flat in the extruded slab can cover them.  The glyph
    is shifted so that the pixel pair under the root anchor is lit.
    """
    h = int(rng.integers(9, 13))
    w = int(rng.integers(8, 11))
    vw = int(rng.integers(3, 5))
    ht = int(rng.integers(1, 3))
    g = np.zeros((h, w), dtype=bool)
    mid = (h - ht) // 2
    segs = _seven_segment(int(digit))
    if digit == 1:
        g[:, (w - vw) // 2:(w - vw) // 2 + vw] = True
    else:
        if "a" in segs:
            g[:ht, :] = True
        if "g" in segs:
            g[mid:mid + ht, :] = True
        if "d" in segs:
            g[h - ht:, :] = True
        if "f" in segs:
            g[:mid + ht, :vw] = True
        if "b" in segs:
            g[:mid + ht, w - vw:] = True
        if "e" in segs:
            g[mid:, :vw] = True
        if "c" in segs:
            g[mid:, w - vw:] = True
    # lit horizontal pairs, preferring ones near the glyph centre
    pairs = np.argwhere(g[:, :-1] & g[:, 1:])
    centre = np.array([(h - 1) / 2, (w - 2) / 2])
    dist = np.abs(pairs - centre).sum(axis=1)
    best = pairs[dist <= dist.min() + 1]
    r, c = best[int(rng.integers(len(best)))]
    canvas = np.zeros((size, size), dtype=np.float64)
    anchor_row = size - 1 - size // 2
    anchor_col = size // 2
    top, left = anchor_row - r, anchor_col - c
    top = min(max(top, 0), size - h)
    left = min(max(left, 0), size - w)
    canvas[top:top + h, left:left + w] = g
    return canvas


def generate_digit_set(count, geom=None, seed=0, depth=2):
    """Extruded digit-style shapes (silhouette targets plus GT voxels)."""
    geom = geom or Geometry()
    out = []
    for i in range(count):
        rng = record_rng(seed, i)
        digit = i % 10
        img = digit_glyph(digit, rng, geom.size)
        grid = extrude_image(img, 0.5, depth, geom)
        out.append(ObjectRecord(
            id=f"digit_{i:05d}", cls=str(digit), grid=geom.size, voxels=grid,
            meta={"depth": depth, "source": "glyph"},
        ))
    return out


# --------------------------------------------------------------------------
# datasets


@dataclass
class ObjectRecord:
    id: str
    cls: str = ""
    grid: int = 32
    tree: Optional[LegoTree] = None
    voxels: Optional[np.ndarray] = None
    silhouettes: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def target_voxels(self):
        if self.voxels is not None:
            return self.voxels
        if self.tree is not None:
            return self.tree.voxels()
        raise DataError(f"record {self.id} has neither a tree nor voxels")

    def views(self):
        if self.silhouettes is None:
            self.silhouettes = render_silhouettes(self.target_voxels())
        return self.silhouettes


def records_from_trees(trees, prefix="rad", cls="rad"):
    return [
        ObjectRecord(id=f"{prefix}_{i:05d}", cls=cls, grid=t.geom.size, tree=t)
        for i, t in enumerate(trees)
    ]


def write_dataset(records, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in records:
        if rec.tree is not None:
            row = rec.tree.to_record(rec.id, rec.cls)
        else:
            row = {"id": rec.id, "class": rec.cls, "grid": rec.grid,
                   "poses": None, "parent": None, "edge": None}
        if rec.voxels is not None:
            row["voxels"] = f"{rec.id}.voxl"
            write_voxels(out_dir / row["voxels"], rec.voxels)
        views = rec.views()
        names = [f"{rec.id}_{v}.pgm" for v in range(3)]
        for name, img in zip(names, views):
            write_pgm(out_dir / name, img)
        row["silhouettes"] = names
        if rec.meta:
            row["meta"] = rec.meta
        lines.append(json.dumps(row, separators=(",", ":")))
    (out_dir / MANIFEST).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return out_dir / MANIFEST


def parse_manifest_line(line, lineno):
    try:
        row = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", line=lineno) from exc
    if not isinstance(row, dict):
        raise ParseError("record is not a JSON object", line=lineno)
    for key in ("id", "grid", "silhouettes"):
        if key not in row:
            raise ParseError(f"missing field {key!r}", line=lineno)
    return row


def read_dataset(in_dir, load_images=True):
    in_dir = Path(in_dir)
    text = (in_dir / MANIFEST).read_text(encoding="utf-8")
    records = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        row = parse_manifest_line(line, lineno)
        tree = None
        if row.get("poses") is not None:
            try:
                tree = LegoTree.from_record(row)
            except ParseError as exc:
                raise ParseError(str(exc), line=lineno) from exc
            problems = validate_tree(tree)
            if problems:
                raise ParseError(f"invalid tree: {problems[0]}", line=lineno)
        voxels = read_voxels(in_dir / row["voxels"]) if row.get("voxels") else None
        views = None
        if load_images:
            views = np.stack([read_pgm(in_dir / name) for name in row["silhouettes"]])
            views = views.astype(np.float32)
        records.append(ObjectRecord(
            id=str(row["id"]), cls=str(row.get("class", "")), grid=int(row["grid"]),
            tree=tree, voxels=voxels, silhouettes=views, meta=row.get("meta", {}),
        ))
    return records
