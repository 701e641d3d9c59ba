"""Central finite-difference checks for analytic gradients."""

import numpy as np


def relative_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def numeric_grad(loss_fn, array, index, h=1e-3):
    """d loss / d array[index] by central differences; ``array`` is perturbed in place."""
    old = array[index].copy() if hasattr(array[index], "copy") else array[index]
    array[index] = old + h
    up = float(loss_fn())
    array[index] = old - h
    down = float(loss_fn())
    array[index] = old
    return (up - down) / (2 * h)


def check_coordinates(loss_fn, array, analytic, indices, h=1e-3):
    """Largest relative error between ``analytic`` and numeric gradients at ``indices``."""
    worst = 0.0
    for idx in indices:
        num = numeric_grad(loss_fn, array, idx, h)
        worst = max(worst, relative_error(float(analytic[idx]), num))
    return worst


def sample_indices(shape, count, rng):
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(count, size), replace=False)
    return [np.unravel_index(int(i), shape) for i in flat]
