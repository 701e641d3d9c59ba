"""BFS assembly trees, action encoding/decoding and re-rooting augmentation."""

from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import _kernels
from .bricks import (
    DEFAULT_GEOMETRY,
    DOWN,
    UP,
    BrickPose,
    ConnectionType,
    Geometry,
    _unchecked_child,
    child_pose,
    flat_cells,
    in_bounds,
    placement_between,
    transpose_pose,
)
from .errors import Disconnected, EmptyInput, OutOfBounds, ParseError


class Edge(NamedTuple):
    ctype: ConnectionType
    direction: int


@dataclass(frozen=True)
class ActionRecord:
    """Connection types spawning children above (``up``) and below (``down``)."""

    up: frozenset = frozenset()
    down: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "up", frozenset(int(t) for t in self.up))
        object.__setattr__(self, "down", frozenset(int(t) for t in self.down))

    def side(self, direction):
        return self.up if direction == UP else self.down

    @property
    def empty(self):
        return not self.up and not self.down

    def slots(self, n_types=16):
        return sorted(self.up) + [n_types + t for t in sorted(self.down)]

    def to_json(self):
        return [sorted(self.up), sorted(self.down)]

    @classmethod
    def from_json(cls, obj):
        up, down = obj
        return cls(up, down)


@dataclass
class DecodeReport:
    dropped: int = 0
    consumed: int = 0
    legal: list = field(default_factory=list)
    non_tree_edges: list = field(default_factory=list)


@dataclass
class LegoTree:
    bricks: list
    parent: list
    edge: list
    depth: list
    geom: Geometry = DEFAULT_GEOMETRY
    non_tree_edges: list = field(default_factory=list, compare=False, repr=False)

    def __len__(self):
        return len(self.bricks)

    def children(self, i):
        return [j for j in range(i + 1, len(self.bricks)) if self.parent[j] == i]

    def voxels(self):
        S = self.geom.size
        flat = np.zeros(S ** 3, dtype=np.uint8)
        for p in self.bricks:
            flat[flat_cells(p, self.geom)] = 1
        return flat.reshape(S, S, S)

    def to_record(self, obj_id, cls=""):
        return {
            "id": obj_id,
            "class": cls,
            "grid": self.geom.size,
            "poses": [list(map(int, p)) for p in self.bricks],
            "parent": list(self.parent),
            "edge": [
                None if e is None else [e.ctype.dx, e.ctype.dy, e.ctype.rot, e.direction]
                for e in self.edge
            ],
        }

    @classmethod
    def from_record(cls, rec, width=2, length=4):
        geom = Geometry(int(rec["grid"]), width, length)
        try:
            bricks = [BrickPose(*map(int, p)) for p in rec["poses"]]
            parent = [None if p is None else int(p) for p in rec["parent"]]
            edges = []
            for e in rec["edge"]:
                if e is None:
                    edges.append(None)
                    continue
                dx, dy, rot, d = map(int, e)
                t = geom.type_by_key.get((dx, dy, rot))
                if t is None:
                    raise ParseError(f"unknown connection type {(dx, dy, rot)}")
                edges.append(Edge(t, d))
        except (TypeError, ValueError, KeyError) as exc:
            raise ParseError(f"malformed object record: {exc}") from exc
        if not (len(bricks) == len(parent) == len(edges)):
            raise ParseError("poses/parent/edge lengths differ")
        depth = []
        for i, p in enumerate(parent):
            if p is None:
                depth.append(0)
            elif 0 <= p < i:
                depth.append(depth[p] + 1)
            else:
                raise ParseError(f"parent index {p} of brick {i} is not earlier in BFS order")
        return cls(bricks, parent, edges, depth, geom)


def _root_tree(geom, root=None):
    root = root or geom.root_pose
    return LegoTree([root], [None], [None], [0], geom)


def decode_actions(actions, geom=DEFAULT_GEOMETRY, max_bricks=64, root=None):
    """Build a tree from per-brick action records, dropping illegal children.

    Brick ``n`` consumes ``actions[n]`` (missing records count as empty).
    Children are spawned ``up`` before ``down``, each side in ascending type
    index; a child leaving the grid, colliding, or exceeding ``max_bricks``
    is silently dropped and counted in the report.
    """
    if len(actions) == 0:
        raise EmptyInput("no action records")
    tree = _root_tree(geom, root)
    report = DecodeReport()
    flat = np.zeros(geom.n_cells, dtype=np.uint8)
    flat[flat_cells(tree.bricks[0], geom)] = 1
    n_types = geom.n_types
    n = 0
    while n < len(tree.bricks):
        rec = actions[n] if n < len(actions) else ActionRecord()
        report.consumed += 1
        want = np.zeros(geom.n_slots, dtype=np.bool_)
        for d in (UP, DOWN):
            for t in rec.side(d):
                want[d * n_types + t] = True
        p = tree.bricks[n]
        legal, spawned = _kernels.expand_brick(
            flat, geom.size, p.x, p.y, p.z, p.r,
            geom.slot_offsets, geom.cell_offsets, want, max_bricks - len(tree.bricks),
        )
        report.legal.append(legal)
        report.dropped += int(want.sum() - spawned.sum())
        for c in np.flatnonzero(spawned):
            t, d = geom.slot_to_edge(int(c))
            tree.bricks.append(_unchecked_child(p, t, d))
            tree.parent.append(n)
            tree.edge.append(Edge(t, d))
            tree.depth.append(tree.depth[n] + 1)
        n += 1
    return tree, report


def tree_from_actions(actions, geom=DEFAULT_GEOMETRY, max_bricks=64):
    return decode_actions(actions, geom, max_bricks)[0]


def actions_from_tree(tree):
    ups = [set() for _ in tree.bricks]
    downs = [set() for _ in tree.bricks]
    for i in range(1, len(tree.bricks)):
        e = tree.edge[i]
        (ups if e.direction == UP else downs)[tree.parent[i]].add(e.ctype.index)
    return [ActionRecord(u, d) for u, d in zip(ups, downs)]


def graph_from_bricks(poses, geom=DEFAULT_GEOMETRY):
    """Undirected adjacency lists: i ~ j iff one is a legal placement of the other."""
    where = {tuple(p): i for i, p in enumerate(poses)}
    adj = [set() for _ in poses]
    for i, p in enumerate(poses):
        for d in (UP, DOWN):
            for t in geom.types:
                j = where.get(tuple(_unchecked_child(p, t, d)))
                if j is not None and j != i:
                    adj[i].add(j)
                    adj[j].add(i)
    return [sorted(a) for a in adj]


def bfs_tree(adj, poses, root=0, geom=DEFAULT_GEOMETRY, counter=None):
    """Spanning BFS tree of a brick graph, children ordered by (direction, type).

    ``counter`` (a dict) receives ``"comparisons"``: one per visited node plus
    one per tree edge, i.e. ``2n - 1`` for ``n`` bricks.
    """
    n = len(poses)
    order = [root]
    index = {root: 0}
    parent = [None]
    edges = [None]
    depth = [0]
    extra = []
    queue = deque([root])
    comparisons = 0
    while queue:
        u = queue.popleft()
        comparisons += 1
        found = []
        for v in adj[u]:
            if v in index:
                if index[v] < index[u] and parent[index[u]] != index[v]:
                    extra.append((index[v], index[u]))
                continue
            t, d = placement_between(poses[u], poses[v], geom)
            found.append((d, t.index, t, v))
        found.sort(key=lambda item: (item[0], item[1]))
        for d, _, t, v in found:
            index[v] = len(order)
            order.append(v)
            parent.append(index[u])
            edges.append(Edge(t, d))
            depth.append(depth[index[u]] + 1)
            queue.append(v)
            comparisons += 1
    if counter is not None:
        counter["comparisons"] = counter.get("comparisons", 0) + comparisons
    if len(order) != n:
        missing = sorted(set(range(n)) - set(order))
        raise Disconnected(f"bricks {missing} unreachable from root {root}")
    tree = LegoTree([BrickPose(*poses[i]) for i in order], parent, edges, depth, geom)
    tree.non_tree_edges = sorted(set(extra))
    return tree


def reorder_actions(tree, new_root):
    """Re-root ``tree`` at brick ``new_root`` and move that brick to the grid centre.

    A rotated new root is first transposed (every pose mirrored in x=y) so
    the root always sits at ``r=0``.  Returns the new tree and its labels.
    """
    geom = tree.geom
    if not 0 <= new_root < len(tree.bricks):
        raise IndexError(f"root index {new_root} out of range")
    poses = list(tree.bricks)
    if poses[new_root].r == 1:
        poses = [transpose_pose(p) for p in poses]
    anchor = poses[new_root]
    c = geom.center
    sx, sy, sz = c - anchor.x, c - anchor.y, c - anchor.z
    moved = [BrickPose(p.x + sx, p.y + sy, p.z + sz, p.r) for p in poses]
    for p in moved:
        if not in_bounds(p, geom):
            raise OutOfBounds(f"re-rooted pose {tuple(p)} leaves the {geom.size}^3 grid")
    adj = graph_from_bricks(moved, geom)
    new_tree = bfs_tree(adj, moved, new_root, geom)
    return new_tree, actions_from_tree(new_tree)


def validate_tree(tree):
    """Return a list of violated tree invariants (empty when valid)."""
    problems = []
    geom = tree.geom
    n = len(tree.bricks)
    if not (len(tree.parent) == len(tree.edge) == len(tree.depth) == n):
        return ["field lengths differ"]
    if n == 0:
        return ["empty tree"]
    if tree.parent[0] is not None or tree.edge[0] is not None or tree.depth[0] != 0:
        problems.append("index 0 is not a root")
    flat = np.zeros(geom.n_cells, dtype=np.uint8)
    last_parent = 0
    for i, p in enumerate(tree.bricks):
        if not in_bounds(p, geom):
            problems.append(f"brick {i} out of bounds")
            continue
        cells = flat_cells(p, geom)
        if flat[cells].any():
            problems.append(f"brick {i} collides")
        flat[cells] = 1
        if i == 0:
            continue
        par = tree.parent[i]
        if par is None or not 0 <= par < i:
            problems.append(f"brick {i} parent {par} violates BFS order")
            continue
        if par < last_parent:
            problems.append(f"brick {i} breaks BFS child grouping")
        last_parent = par
        e = tree.edge[i]
        try:
            expect = child_pose(tree.bricks[par], e.ctype, e.direction, geom)
        except OutOfBounds:
            expect = None
        if expect != p:
            problems.append(f"brick {i} does not match edge from parent {par}")
        if tree.depth[i] != tree.depth[par] + 1:
            problems.append(f"brick {i} depth {tree.depth[i]} inconsistent")
        if i > 1 and tree.parent[i - 1] == par:
            prev = tree.edge[i - 1]
            if (prev.direction, prev.ctype.index) >= (e.direction, e.ctype.index):
                problems.append(f"brick {i} sibling order")
    return problems
