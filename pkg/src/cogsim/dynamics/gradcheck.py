"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np


def gradient_check(
    loss_fn: Callable[[np.ndarray], float],
    grad_fn: Callable[[np.ndarray], np.ndarray],
    point: np.ndarray,
    eps: float = 1e-5,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Relative error per coordinate is |ga - gfd| / max(|ga| + |gfd|, 1e-8),
    which stays meaningful when both gradients are near zero.
    """
    point = np.asarray(point, dtype=float)
    analytic = np.asarray(grad_fn(point), dtype=float)
    if analytic.shape != point.shape:
        raise ValueError("gradient shape does not match point shape")
    fd = np.empty_like(point)
    for i in range(point.size):
        bump = np.zeros_like(point)
        bump[i] = eps
        fd[i] = (loss_fn(point + bump) - loss_fn(point - bump)) / (2 * eps)
    denom = np.maximum(np.abs(analytic) + np.abs(fd), 1e-8)
    return float(np.max(np.abs(analytic - fd) / denom))
