"""Hot inner loops, each in a numba and a pure-numpy flavour.

The active implementation is chosen once at import time:

    BRICKFORGE_NUMBA=0   force the numpy path
    BRICKFORGE_NUMBA=1   use numba when importable (default)

Both flavours are always reachable as ``numpy_impl`` and ``numba_impl``
(the latter is ``None`` when numba is missing) so tests can check parity
and ``benchmarks/bench_kernels.py`` can time them against each other.

Array conventions: voxel grids are flat ``uint8``/float arrays of length
S**3 with index ``(z * S + y) * S + x``; placement slots are numbered
``direction * n_types + type_index``; footprint tables come from
:class:`brickforge.bricks.Geometry`.
"""

import os
from types import SimpleNamespace

import numpy as np

__all__ = [
    "expand_brick",
    "child_cells",
    "scatter_footprints",
    "gather_footprints",
    "nonzero_mean_axis0",
    "nonzero_mean_axis0_grad",
    "backend",
    "numpy_impl",
    "numba_impl",
]


# --------------------------------------------------------------------------
# numpy path


def _np_expand_brick(occ, S, px, py, pz, pr, slot_offsets, cell_offsets, want, budget):
    n_slots = slot_offsets.shape[1]
    legal = np.zeros(n_slots, dtype=np.bool_)
    spawned = np.zeros(n_slots, dtype=np.bool_)
    offs = slot_offsets[pr]
    cx = px + offs[:, 0]
    cy = py + offs[:, 1]
    cz = pz + offs[:, 2]
    cr = offs[:, 3]
    # [slots, K] candidate cells
    xs = cx[:, None] + cell_offsets[cr, :, 0]
    ys = cy[:, None] + cell_offsets[cr, :, 1]
    inb = (
        (xs >= 0).all(1) & (xs < S).all(1)
        & (ys >= 0).all(1) & (ys < S).all(1)
        & (cz >= 0) & (cz < S)
    )
    for c in range(n_slots):
        if not inb[c]:
            continue
        idx = (cz[c] * S + ys[c]) * S + xs[c]
        if occ[idx].any():
            continue
        legal[c] = True
        if want[c] and budget > 0:
            occ[idx] = 1
            spawned[c] = True
            budget -= 1
    return legal, spawned


def _np_child_cells(poses, S, slot_offsets, cell_offsets):
    n = poses.shape[0]
    n_slots = slot_offsets.shape[1]
    k = cell_offsets.shape[1]
    if n == 0:
        return np.zeros((0, n_slots, k), dtype=np.int64)
    offs = slot_offsets[poses[:, 3]]  # [n, slots, 4]
    cx = poses[:, 0:1] + offs[:, :, 0]
    cy = poses[:, 1:2] + offs[:, :, 1]
    cz = poses[:, 2:3] + offs[:, :, 2]
    cr = offs[:, :, 3]
    xs = cx[:, :, None] + cell_offsets[cr, :, 0]
    ys = cy[:, :, None] + cell_offsets[cr, :, 1]
    zs = np.broadcast_to(cz[:, :, None], xs.shape)
    inb = ((xs >= 0) & (xs < S) & (ys >= 0) & (ys < S) & (zs >= 0) & (zs < S)).all(2)
    cells = (zs * S + ys) * S + xs
    cells[~inb] = -1
    return cells.astype(np.int64)


def _np_scatter_footprints(weights, cells, n_cells):
    n, n_slots, k = cells.shape
    out = np.zeros((n, n_cells), dtype=weights.dtype)
    valid = cells >= 0
    rows = np.broadcast_to(np.arange(n)[:, None, None], cells.shape)[valid]
    vals = np.broadcast_to(weights[:, :, None], cells.shape)[valid]
    flat = rows * n_cells + cells[valid]
    np.add.at(out.reshape(-1), flat, vals)
    return out


def _np_gather_footprints(grad, cells):
    valid = cells >= 0
    rows = np.arange(cells.shape[0])[:, None, None]
    picked = grad[rows, np.where(valid, cells, 0)]
    picked = np.where(valid, picked, 0)
    return picked.sum(axis=2).astype(grad.dtype)


def _np_nonzero_mean_axis0(x):
    count = (x > 0).sum(axis=0)
    total = np.where(x > 0, x, 0).sum(axis=0)
    out = np.zeros(x.shape[1:], dtype=x.dtype)
    np.divide(total, count, out=out, where=count > 0)
    return out, count.astype(np.int64)


def _np_nonzero_mean_axis0_grad(x, count, grad):
    scale = np.zeros(grad.shape, dtype=x.dtype)
    np.divide(grad, count, out=scale, where=count > 0)
    return np.where(x > 0, scale[None], 0).astype(x.dtype)


numpy_impl = SimpleNamespace(
    expand_brick=_np_expand_brick,
    child_cells=_np_child_cells,
    scatter_footprints=_np_scatter_footprints,
    gather_footprints=_np_gather_footprints,
    nonzero_mean_axis0=_np_nonzero_mean_axis0,
    nonzero_mean_axis0_grad=_np_nonzero_mean_axis0_grad,
    name="numpy",
)


# --------------------------------------------------------------------------
# numba path


def _build_numba():
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        return None

    @njit(cache=True)
    def expand_brick(occ, S, px, py, pz, pr, slot_offsets, cell_offsets, want, budget):
        n_slots = slot_offsets.shape[1]
        k = cell_offsets.shape[1]
        legal = np.zeros(n_slots, dtype=np.bool_)
        spawned = np.zeros(n_slots, dtype=np.bool_)
        for c in range(n_slots):
            cx = px + slot_offsets[pr, c, 0]
            cy = py + slot_offsets[pr, c, 1]
            cz = pz + slot_offsets[pr, c, 2]
            cr = slot_offsets[pr, c, 3]
            if cz < 0 or cz >= S:
                continue
            ok = True
            for j in range(k):
                x = cx + cell_offsets[cr, j, 0]
                y = cy + cell_offsets[cr, j, 1]
                if x < 0 or x >= S or y < 0 or y >= S:
                    ok = False
                    break
                if occ[(cz * S + y) * S + x] != 0:
                    ok = False
                    break
            if not ok:
                continue
            legal[c] = True
            if want[c] and budget > 0:
                for j in range(k):
                    x = cx + cell_offsets[cr, j, 0]
                    y = cy + cell_offsets[cr, j, 1]
                    occ[(cz * S + y) * S + x] = 1
                spawned[c] = True
                budget -= 1
        return legal, spawned

    @njit(cache=True)
    def child_cells(poses, S, slot_offsets, cell_offsets):
        n = poses.shape[0]
        n_slots = slot_offsets.shape[1]
        k = cell_offsets.shape[1]
        out = np.full((n, n_slots, k), -1, dtype=np.int64)
        for i in range(n):
            pr = poses[i, 3]
            for c in range(n_slots):
                cx = poses[i, 0] + slot_offsets[pr, c, 0]
                cy = poses[i, 1] + slot_offsets[pr, c, 1]
                cz = poses[i, 2] + slot_offsets[pr, c, 2]
                cr = slot_offsets[pr, c, 3]
                if cz < 0 or cz >= S:
                    continue
                ok = True
                for j in range(k):
                    x = cx + cell_offsets[cr, j, 0]
                    y = cy + cell_offsets[cr, j, 1]
                    if x < 0 or x >= S or y < 0 or y >= S:
                        ok = False
                        break
                if not ok:
                    continue
                for j in range(k):
                    x = cx + cell_offsets[cr, j, 0]
                    y = cy + cell_offsets[cr, j, 1]
                    out[i, c, j] = (cz * S + y) * S + x
        return out

    @njit(cache=True)
    def scatter_footprints(weights, cells, n_cells):
        n, n_slots, k = cells.shape
        out = np.zeros((n, n_cells), dtype=weights.dtype)
        for i in range(n):
            for c in range(n_slots):
                w = weights[i, c]
                if w == 0:
                    continue
                for j in range(k):
                    cell = cells[i, c, j]
                    if cell >= 0:
                        out[i, cell] += w
        return out

    @njit(cache=True)
    def gather_footprints(grad, cells):
        n, n_slots, k = cells.shape
        out = np.zeros((n, n_slots), dtype=grad.dtype)
        for i in range(n):
            for c in range(n_slots):
                acc = grad.dtype.type(0)
                for j in range(k):
                    cell = cells[i, c, j]
                    if cell >= 0:
                        acc += grad[i, cell]
                out[i, c] = acc
        return out

    @njit(cache=True)
    def nonzero_mean_axis0(x):
        m, p = x.shape
        out = np.zeros(p, dtype=x.dtype)
        count = np.zeros(p, dtype=np.int64)
        for i in range(m):
            for j in range(p):
                v = x[i, j]
                if v > 0:
                    out[j] += v
                    count[j] += 1
        for j in range(p):
            if count[j] > 0:
                out[j] /= count[j]
        return out, count

    @njit(cache=True)
    def nonzero_mean_axis0_grad(x, count, grad):
        m, p = x.shape
        out = np.zeros((m, p), dtype=x.dtype)
        for i in range(m):
            for j in range(p):
                if x[i, j] > 0:
                    out[i, j] = grad[j] / count[j]
        return out

    def _nz_mean(x):
        x2 = np.ascontiguousarray(x).reshape(x.shape[0], -1)
        out, count = nonzero_mean_axis0(x2)
        return out.reshape(x.shape[1:]), count.reshape(x.shape[1:])

    def _nz_grad(x, count, grad):
        x2 = np.ascontiguousarray(x).reshape(x.shape[0], -1)
        g = nonzero_mean_axis0_grad(
            x2, np.ascontiguousarray(count).reshape(-1),
            np.ascontiguousarray(grad, dtype=x.dtype).reshape(-1),
        )
        return g.reshape(x.shape)

    def _scatter(weights, cells, n_cells):
        return scatter_footprints(
            np.ascontiguousarray(weights), np.ascontiguousarray(cells), int(n_cells)
        )

    def _gather(grad, cells):
        return gather_footprints(np.ascontiguousarray(grad), np.ascontiguousarray(cells))

    def _expand(occ, S, px, py, pz, pr, slot_offsets, cell_offsets, want, budget):
        return expand_brick(
            occ, int(S), int(px), int(py), int(pz), int(pr),
            slot_offsets, cell_offsets, np.ascontiguousarray(want, dtype=np.bool_), int(budget),
        )

    def _cells(poses, S, slot_offsets, cell_offsets):
        poses = np.ascontiguousarray(poses, dtype=np.int64).reshape(-1, 4)
        return child_cells(poses, int(S), slot_offsets, cell_offsets)

    return SimpleNamespace(
        expand_brick=_expand,
        child_cells=_cells,
        scatter_footprints=_scatter,
        gather_footprints=_gather,
        nonzero_mean_axis0=_nz_mean,
        nonzero_mean_axis0_grad=_nz_grad,
        name="numba",
    )


def _want_numba():
    flag = os.environ.get("BRICKFORGE_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


numba_impl = _build_numba()
_active = numba_impl if (numba_impl is not None and _want_numba()) else numpy_impl
backend = _active.name

expand_brick = _active.expand_brick
child_cells = _active.child_cells
scatter_footprints = _active.scatter_footprints
gather_footprints = _active.gather_footprints
nonzero_mean_axis0 = _active.nonzero_mean_axis0
nonzero_mean_axis0_grad = _active.nonzero_mean_axis0_grad
