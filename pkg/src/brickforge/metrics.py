"""Voxel IoU, per-class mIoU, step-wise action accuracy and legality rate."""

from collections import Counter

import numpy as np

from .errors import EmptyInput, LengthMismatch, SizeMismatch
from .tree import validate_tree


def iou(pred, target):
    """|C & T| / |C | T| of two binary grids; 1 when both are empty."""
    c = np.asarray(pred) > 0
    t = np.asarray(target) > 0
    if c.shape != t.shape:
        raise SizeMismatch(f"iou: grid shapes {c.shape} and {t.shape} differ")
    union = np.count_nonzero(c | t)
    if union == 0:
        return 1.0
    return np.count_nonzero(c & t) / union


def miou(per_class):
    """Per-class mean IoU and their unweighted mean: ``(table, mean)``."""
    if not per_class:
        raise EmptyInput("miou needs at least one class")
    table = {}
    for cls, values in per_class.items():
        if len(values) == 0:
            raise EmptyInput(f"class {cls!r} has no IoU values")
        table[cls] = float(np.mean(values))
    return table, float(np.mean(list(table.values())))


def step_accuracy(pred, label):
    """Fraction of steps whose up and down sets both match exactly."""
    if len(pred) != len(label):
        raise LengthMismatch(f"{len(pred)} predicted steps vs {len(label)} labels")
    if not label:
        return 1.0
    hits = sum(p.up == q.up and p.down == q.down for p, q in zip(pred, label))
    return hits / len(label)


def connection_accuracy(pred, label, n_types=16):
    """Per-slot agreement over all 32 placement slots (secondary counter)."""
    if len(pred) != len(label):
        raise LengthMismatch(f"{len(pred)} predicted steps vs {len(label)} labels")
    if not label:
        return 1.0
    agree = 0
    for p, q in zip(pred, label):
        agree += 2 * n_types - len(p.up ^ q.up) - len(p.down ^ q.down)
    return agree / (2 * n_types * len(label))


def majority_baseline(label_lists):
    """Step accuracy of always predicting the most frequent action record."""
    counts = Counter((r.up, r.down) for labels in label_lists for r in labels)
    total = sum(counts.values())
    return counts.most_common(1)[0][1] / total if total else 0.0


def legality_rate(trees):
    """Fraction of emitted placements (non-root bricks) that pass the validator."""
    emitted = 0
    bad = 0
    for tree in trees:
        n = len(tree) - 1
        emitted += n
        bad_bricks = set()
        for problem in validate_tree(tree):
            parts = problem.split()
            if parts[0] == "brick" and parts[1].isdigit():
                bad_bricks.add(int(parts[1]))
        bad += len(bad_bricks - {0})
    return 1.0 if emitted == 0 else 1.0 - bad / emitted
