"""Brick geometry, the connection-type vocabulary, poses and occupancy grids.

Conventions
-----------
A brick with footprint ``(width, length)`` (default 2x4) occupies one cell
in z.  With global rotation ``r=0`` it spans ``width`` cells in x and
``length`` in y; ``r=1`` swaps the two.  Poses are min-corner cell
coordinates.  Occupancy grids are ``uint8`` numpy arrays of shape
``(S, S, S)`` indexed ``[z, y, x]``, so ``grid.ravel()`` follows the flat
order ``(z * S + y) * S + x``.

Relative placements compose with a rotated parent by transposing the
local offset (``dx``/``dy`` swap when ``parent.r == 1``).  Transposition
maps the whole configuration onto its mirror in the x=y plane, so every
overlap count is preserved.
"""

from dataclasses import dataclass
from functools import cached_property, lru_cache
from itertools import product
from typing import NamedTuple, Optional

import numpy as np

from . import _kernels
from .errors import Collision, OutOfBounds

UP = 0
DOWN = 1


@dataclass(frozen=True)
class ConnectionType:
    index: int
    dx: int
    dy: int
    rot: int

    @property
    def key(self):
        return (self.dx, self.dy, self.rot)


class BrickPose(NamedTuple):
    x: int
    y: int
    z: int
    r: int = 0


def _span(width, length, r):
    return (width, length) if r == 0 else (length, width)


def _overlap(width, length, dx, dy, rot):
    """Studs shared by a parent at the origin (r=0) and a child at (dx, dy)."""
    pw, pl = _span(width, length, 0)
    cw, cl = _span(width, length, rot)
    ox = max(0, min(pw, dx + cw) - max(0, dx))
    oy = max(0, min(pl, dy + cl) - max(0, dy))
    return ox * oy


def min_overlap(width=2, length=4):
    return -(-width * length // 2)


@lru_cache(maxsize=None)
def connection_types(width=2, length=4):
    if width == length:
        raise ValueError("square footprints make rotated placements ambiguous")
    reach = max(width, length)
    need = min_overlap(width, length)
    found = []
    for rot in (0, 1):
        for dx in range(-reach, reach + 1):
            for dy in range(-reach, reach + 1):
                if _overlap(width, length, dx, dy, rot) >= need:
                    found.append((rot, dx, dy))
    found.sort()
    return tuple(ConnectionType(i, dx, dy, rot) for i, (rot, dx, dy) in enumerate(found))


def enumerate_connection_types(width=2, length=4):
    """All relative placements sharing at least half the studs, by (rot, dx, dy)."""
    return list(connection_types(width, length))


def stud_overlap(t, width=2, length=4):
    return _overlap(width, length, t.dx, t.dy, t.rot)


@dataclass(frozen=True)
class Geometry:
    """Grid size plus brick footprint; owns the lookup tables used by kernels."""

    size: int = 32
    width: int = 2
    length: int = 4

    @cached_property
    def types(self):
        return connection_types(self.width, self.length)

    @property
    def n_types(self):
        return len(self.types)

    @property
    def n_slots(self):
        return 2 * self.n_types

    @property
    def n_cells(self):
        return self.size ** 3

    @property
    def center(self):
        return self.size // 2

    @property
    def root_pose(self):
        c = self.center
        return BrickPose(c, c, c, 0)

    @cached_property
    def type_by_key(self):
        return {t.key: t for t in self.types}

    @cached_property
    def cell_offsets(self):
        # [r, K, 2] (x, y) offsets of footprint cells from the min-corner
        tables = []
        for r in (0, 1):
            sx, sy = _span(self.width, self.length, r)
            tables.append([(i, j) for j in range(sy) for i in range(sx)])
        return np.asarray(tables, dtype=np.int64)

    @cached_property
    def slot_offsets(self):
        # [parent r, slot, (ox, oy, oz, child r)]
        table = np.zeros((2, self.n_slots, 4), dtype=np.int64)
        for pr in (0, 1):
            for d in (UP, DOWN):
                for t in self.types:
                    ox, oy = (t.dx, t.dy) if pr == 0 else (t.dy, t.dx)
                    dz = 1 if d == UP else -1
                    table[pr, d * self.n_types + t.index] = (ox, oy, dz, pr ^ t.rot)
        return table

    def slot(self, t, direction):
        return direction * self.n_types + t.index

    def slot_to_edge(self, slot):
        return self.types[slot % self.n_types], slot // self.n_types


DEFAULT_GEOMETRY = Geometry()


def footprint_cells(pose, geom=DEFAULT_GEOMETRY):
    """The (x, y, z) cells covered by ``pose``; no bounds check."""
    offs = geom.cell_offsets[pose.r]
    return [(pose.x + int(i), pose.y + int(j), pose.z) for i, j in offs]


def in_bounds(pose, geom=DEFAULT_GEOMETRY):
    S = geom.size
    sx, sy = _span(geom.width, geom.length, pose.r)
    return (
        0 <= pose.x and pose.x + sx <= S
        and 0 <= pose.y and pose.y + sy <= S
        and 0 <= pose.z < S
    )


def flat_cells(pose, geom=DEFAULT_GEOMETRY):
    S = geom.size
    offs = geom.cell_offsets[pose.r]
    return (pose.z * S + pose.y + offs[:, 1]) * S + pose.x + offs[:, 0]


def child_pose(parent, t, direction, geom=DEFAULT_GEOMETRY):
    if parent.r == 0:
        x, y = parent.x + t.dx, parent.y + t.dy
    else:
        x, y = parent.x + t.dy, parent.y + t.dx
    z = parent.z + 1 if direction == UP else parent.z - 1
    child = BrickPose(x, y, z, parent.r ^ t.rot)
    if not in_bounds(child, geom):
        raise OutOfBounds(f"child pose {tuple(child)} leaves the {geom.size}^3 grid")
    return child


def _unchecked_child(parent, t, direction):
    if parent.r == 0:
        x, y = parent.x + t.dx, parent.y + t.dy
    else:
        x, y = parent.x + t.dy, parent.y + t.dx
    z = parent.z + 1 if direction == UP else parent.z - 1
    return BrickPose(x, y, z, parent.r ^ t.rot)


def placement_between(a, b, geom=DEFAULT_GEOMETRY) -> Optional[tuple]:
    """The (type, direction) placing ``b`` relative to ``a``, if one exists."""
    dz = b.z - a.z
    if dz == 1:
        direction = UP
    elif dz == -1:
        direction = DOWN
    else:
        return None
    ox, oy = b.x - a.x, b.y - a.y
    if a.r == 1:
        ox, oy = oy, ox
    t = geom.type_by_key.get((ox, oy, a.r ^ b.r))
    if t is None:
        return None
    return t, direction


def transpose_pose(pose):
    """Mirror a pose in the x=y plane (the footprint swaps its spans)."""
    return BrickPose(pose.y, pose.x, pose.z, 1 - pose.r)


def empty_grid(size=32):
    return np.zeros((size, size, size), dtype=np.uint8)


def occupy(grid, pose, geom=None):
    """Return a copy of ``grid`` with the footprint of ``pose`` set to 1."""
    geom = geom or Geometry(size=grid.shape[0])
    if not in_bounds(pose, geom):
        raise OutOfBounds(f"pose {tuple(pose)} leaves the {geom.size}^3 grid")
    out = grid.copy()
    cells = flat_cells(pose, geom)
    flat = out.reshape(-1)
    if flat[cells].any():
        raise Collision(f"pose {tuple(pose)} overlaps occupied cells")
    flat[cells] = 1
    return out


def occupy_inplace(flat, pose, geom):
    """Set footprint cells in a flat grid; returns False on collision or bounds."""
    if not in_bounds(pose, geom):
        return False
    cells = flat_cells(pose, geom)
    if flat[cells].any():
        return False
    flat[cells] = 1
    return True


def legal_placements(grid, parent, geom=None):
    """(type, direction) pairs whose child is in bounds and collision-free.

    Ordered by direction, then type index.
    """
    geom = geom or Geometry(size=grid.shape[0])
    flat = np.ascontiguousarray(grid).reshape(-1).copy()
    want = np.zeros(geom.n_slots, dtype=np.bool_)
    legal, _ = _kernels.expand_brick(
        flat, geom.size, parent.x, parent.y, parent.z, parent.r,
        geom.slot_offsets, geom.cell_offsets, want, 0,
    )
    return [geom.slot_to_edge(int(c)) for c in np.flatnonzero(legal)]


def voxelize(poses, geom=DEFAULT_GEOMETRY):
    """Binary grid of a set of poses; raises on bounds or collision."""
    flat = np.zeros(geom.n_cells, dtype=np.uint8)
    for p in poses:
        if not in_bounds(p, geom):
            raise OutOfBounds(f"pose {tuple(p)} leaves the {geom.size}^3 grid")
        cells = flat_cells(p, geom)
        if flat[cells].any():
            raise Collision(f"pose {tuple(p)} overlaps occupied cells")
        flat[cells] = 1
    S = geom.size
    return flat.reshape(S, S, S)
