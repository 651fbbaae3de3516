"""Central finite-difference oracle for gradient checks (64-bit only)."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward

FD_STEP = 1e-5
RTOL_FLOAT64 = 1e-4
RTOL_FLOAT32 = 5e-2


def numerical_grad(fn: Callable[[], float], array: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Perturb ``array`` in place entry by entry; ``fn`` re-evaluates the loss."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``."""
    diff = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = FD_STEP,
) -> dict[str, float]:
    """Compare :func:`backward` against finite differences for each param.

    ``loss_fn`` must rebuild the graph from ``params`` on every call.
    Returns ``{name: relative error}``.
    """
    for p in params.values():
        if p.data.dtype != np.float64:
            raise TypeError("gradient checks require float64 parameters")
    analytic = backward(loss_fn(), params)
    errors = {}
    for name, p in params.items():
        numeric = numerical_grad(lambda: float(loss_fn().data), p.data, step)
        errors[name] = relative_error(analytic[name], numeric)
    return errors
