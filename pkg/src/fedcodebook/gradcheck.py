"""Central finite-difference gradient checking.

Deliberately knows nothing about the tensor engine: the loss is an
opaque callable over plain numpy arrays, re-evaluated per perturbation,
so the numeric gradient is an independent route to the same quantity.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def finite_difference_gradients(loss_fn: Callable[[Sequence[np.ndarray]], float],
                                arrays: Sequence[np.ndarray],
                                eps: float = 1e-5) -> list[np.ndarray]:
    """Numeric gradient of `loss_fn` at `arrays`, one output per input array."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn(arrays)
            flat[i] = orig - eps
            lo = loss_fn(arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads


def max_relative_error(analytic: Sequence[np.ndarray],
                       numeric: Sequence[np.ndarray],
                       floor: float = 1e-6) -> float:
    """Worst elementwise |a - n| / max(|a|, |n|, floor) across all arrays."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.asarray(a, dtype=np.float64)
        n = np.asarray(n, dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if a.size:
            worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst
