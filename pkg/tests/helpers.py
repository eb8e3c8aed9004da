"""Shared numerical test utilities."""

import numpy as np

from wishart_sde import ndcore as nd


def central_difference(fn, param, h=1e-5):
    """Numerical gradient of the scalar ``fn()`` with respect to ``param.value``."""
    base = param.value.copy()
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        bumped = base.copy()
        bumped[idx] += h
        param.value = bumped
        up = float(fn())
        bumped[idx] -= 2 * h
        param.value = bumped
        down = float(fn())
        grad[idx] = (up - down) / (2 * h)
    param.value = base
    return grad


def relative_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)


def tape_gradient(fn, params):
    with nd.Tape() as tape:
        loss = fn()
    return tape.gradient(loss, params)
