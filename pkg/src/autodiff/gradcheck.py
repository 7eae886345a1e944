"""Central finite-difference oracle for analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from src.autodiff.tensor import Tape, Tensor

DEFAULT_STEP = 1e-3
DEFAULT_TOLERANCE = 1e-3


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = DEFAULT_STEP) -> float:
    """Return the worst relative disagreement between tape and central differences.

    For every coordinate ``i`` the error is
    ``|analytic - central| / max(|analytic|, |central|, 1e-8)``.  ``x`` is
    perturbed in place and restored; ``f`` must return a scalar tensor.
    """

    was_tracked = x.requires_grad
    previous_grad = x.grad
    x.requires_grad = True
    x.grad = None
    try:
        with Tape() as tape:
            loss = f(x)
        if loss.data.size != 1:
            raise ValueError(f"f must return a scalar, got shape {loss.shape}")
        if loss._tape is tape:
            tape.backward(loss)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.astype(np.float64)

        flat = x.data.reshape(-1)
        central = np.zeros(flat.size, dtype=np.float64)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            upper = f(x).item()
            flat[i] = original - step
            lower = f(x).item()
            flat[i] = original
            central[i] = (upper - lower) / (2 * step)
    finally:
        x.requires_grad = was_tracked
        x.grad = previous_grad

    analytic = analytic.reshape(-1).astype(np.float64)
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(central)), 1e-8)
    return float(np.max(np.abs(analytic - central) / scale))
