"""Differentiable action-to-silhouette pathway and the supervised action loss.

Probabilities of the 32 placement slots of each decoded brick are spread
onto the 8 cells of the corresponding child footprint, thresholded per
brick, averaged over the bricks that touch a cell (non-zero mean), then
projected along the three axes into silhouettes.  Poses are constants;
gradients flow only into the probabilities.
"""

import numpy as np

from . import _kernels
from .autodiff import tensor as T
from .autodiff.tensor import Tensor, _result, as_tensor
from .bricks import DEFAULT_GEOMETRY, UP, flat_cells
from .errors import LengthMismatch, ShapeMismatch
from .tree import ActionRecord

PROJECTIONS = ("nonzero_mean", "max")


def _pose_array(poses):
    return np.asarray([tuple(p) for p in poses], dtype=np.int64).reshape(-1, 4)


def footprint_scatter(probs, cells, n_cells):
    """[n, C] weights onto [n, n_cells] grids through per-slot cell lists [n, C, K]."""
    probs = as_tensor(probs)
    out = _kernels.scatter_footprints(np.ascontiguousarray(probs.data), cells, n_cells)

    def bw(g):
        return (_kernels.gather_footprints(np.ascontiguousarray(g), cells),)

    return _result(out, (probs,), bw)


def map_actions_to_voxels(poses, probs, geom=DEFAULT_GEOMETRY):
    """Per-brick accumulation of child-footprint probabilities, [n, S^3]."""
    probs = as_tensor(probs)
    if probs.ndim != 2 or probs.shape[1] != geom.n_slots or probs.shape[0] != len(poses):
        raise ShapeMismatch(f"expected probs [{len(poses)}, {geom.n_slots}], got {probs.shape}")
    cells = _kernels.child_cells(_pose_array(poses), geom.size, geom.slot_offsets, geom.cell_offsets)
    return footprint_scatter(probs, cells, geom.n_cells)


def map_action_to_voxels(record, geom=DEFAULT_GEOMETRY):
    """Single brick: probabilities of one ActionProbRecord onto an S^3 grid."""
    probs = record.probs if isinstance(record.probs, Tensor) else np.asarray(record.probs)
    out = map_actions_to_voxels([record.pose], T.reshape(as_tensor(probs), (1, geom.n_slots)), geom)
    return T.reshape(out, (geom.n_cells,))


def root_grid(root, geom=DEFAULT_GEOMETRY, dtype=None):
    g = np.zeros(geom.n_cells, dtype=dtype or T.get_default_dtype())
    g[flat_cells(root, geom)] = 1
    return g


def mask_and_aggregate(per_brick, alpha=0.4, root=None, geom=DEFAULT_GEOMETRY):
    """Occupancy probabilities P^o: non-zero mean over bricks of thresholded grids.

    Each per-brick grid is first capped at 1: overlapping slot footprints of
    one parent can sum past 1, which would make the silhouette loss push every
    slot down. ``root`` (a pose) contributes a constant grid of ones.
    """
    if isinstance(per_brick, (list, tuple)):
        shapes = {as_tensor(t).shape for t in per_brick}
        if len(shapes) > 1:
            raise ShapeMismatch(f"mask_and_aggregate: per-brick shapes differ {sorted(shapes)}")
        per_brick = T.stack(per_brick, axis=0)
    per_brick = as_tensor(per_brick)
    kept = T.threshold_keep(T.clip_upper(per_brick, 1.0), alpha)
    if root is not None:
        if per_brick.shape[-1] != geom.n_cells:
            raise ShapeMismatch(f"grid of {per_brick.shape[-1]} cells vs geometry {geom.n_cells}")
        ones = Tensor(root_grid(root, geom, per_brick.dtype)[None])
        kept = T.concat([ones, kept], axis=0)
    return T.nonzero_mean_axis(kept, axis=0)


def project(P_o, size, projection="nonzero_mean"):
    """[I_x, I_y, I_z] from occupancy probabilities, same pixel layout as the renderer."""
    if projection not in PROJECTIONS:
        raise ValueError(f"projection must be one of {PROJECTIONS}")
    g = T.reshape(as_tensor(P_o), (size, size, size))
    reduce = T.nonzero_mean_axis if projection == "nonzero_mean" else T.amax
    views = [T.flip(reduce(g, axis=ax), axis=0) for ax in (2, 1, 0)]
    return T.stack(views, axis=0)


def silhouette_loss(pred, target):
    """Pixel-mean squared error between projected and input silhouettes."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"silhouette_loss: {pred.shape} vs {target.shape}")
    return T.mean(T.square(pred - target))


def render_probabilistic(poses, probs, geom=DEFAULT_GEOMETRY, alpha=0.4, projection="nonzero_mean"):
    """Full pathway for one object: probs [n, 32] -> silhouettes [3, S, S]."""
    per_brick = map_actions_to_voxels(poses, probs, geom)
    P_o = mask_and_aggregate(per_brick, alpha, root=poses[0], geom=geom)
    return project(P_o, geom.size, projection)


# --------------------------------------------------------------------------
# supervised action loss


def action_targets(labels, legal=None, n_types=16):
    """Multi-hot targets and inclusion weights, both [n, 2 * (n_types + 1)].

    Type slots are 1 for present children; a side's stop slot is 1 iff that
    side has no children.  Placement slots illegal under ``legal`` [n, 32]
    get weight 0; stop slots are always included.
    """
    n = len(labels)
    width = n_types + 1
    targets = np.zeros((n, 2 * width), dtype=np.float64)
    weights = np.ones((n, 2 * width), dtype=np.float64)
    for i, rec in enumerate(labels):
        for d in (0, 1):
            side = rec.side(d)
            for t in side:
                targets[i, d * width + t] = 1.0
            targets[i, d * width + n_types] = 0.0 if side else 1.0
    if legal is not None:
        legal = np.asarray(legal, dtype=bool)
        if legal.shape != (n, 2 * n_types):
            raise LengthMismatch(f"legality masks {legal.shape} for {n} labels")
        weights[:, :n_types] = legal[:, :n_types]
        weights[:, width:width + n_types] = legal[:, n_types:]
    return targets, weights


def action_loss(logits, labels, legal=None, n_types=16):
    """Mean BCE over included slots per object, then mean over the batch.

    ``logits`` is [n, 34] with ``labels`` a list of ActionRecords, or a
    padded batch [B, L, 34] with ``labels`` a list of such lists (and
    ``legal`` a matching list of masks).
    """
    logits = as_tensor(logits)
    batched = logits.ndim == 3
    if not batched:
        labels, legal = [labels], [legal]
        logits = T.reshape(logits, (1,) + logits.shape)
    if legal is None:
        legal = [None] * len(labels)
    B, L, C = logits.shape
    if len(labels) != B or len(legal) != B:
        raise LengthMismatch(f"{B} logit rows vs {len(labels)} label lists")
    targets = np.zeros((B, L, C))
    weights = np.zeros((B, L, C))
    for b, (lab, leg) in enumerate(zip(labels, legal)):
        if len(lab) > L or (not batched and len(lab) != L):
            raise LengthMismatch(f"{len(lab)} labels for {L} logit rows")
        y, w = action_targets(lab, leg, n_types)
        targets[b, :len(lab)] = y
        weights[b, :len(lab)] = w / max(w.sum(), 1.0) / B
    return T.bce_with_logits(logits, targets, weights)


def teacher_forced_predictions(logits, n_steps, legal=None, n_types=16, tau=0.5):
    """Thresholded (and legality-masked) per-step action records from [L, 34] logits."""
    from .model import placement_logit_index

    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    pred = z[..., placement_logit_index(n_types)] >= np.log(tau / (1.0 - tau))
    out = []
    for i in range(n_steps):
        row = pred[i] if legal is None else pred[i] & np.asarray(legal[i], dtype=bool)
        out.append(ActionRecord(up=np.flatnonzero(row[:n_types]).tolist(),
                                down=np.flatnonzero(row[n_types:]).tolist()))
    return out


def teacher_forced_accuracy(logits, labels, legal=None, n_types=16, tau=0.5):
    """Per-step exact match of thresholded predictions; returns (hits, steps)."""
    pred = teacher_forced_predictions(logits, len(labels), legal, n_types, tau)
    hits = sum(p.up == q.up and p.down == q.down for p, q in zip(pred, labels))
    return hits, len(labels)


__all__ = [
    "map_actions_to_voxels", "map_action_to_voxels", "mask_and_aggregate", "project",
    "silhouette_loss", "render_probabilistic", "action_targets", "action_loss",
    "teacher_forced_accuracy", "teacher_forced_predictions", "footprint_scatter", "root_grid", "UP",
]
