from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    """Raised when a gradient contains NaN/inf; carries the offending names."""

    def __init__(self, names: list[str], diagnostics: dict | None = None):
        self.names = names
        self.diagnostics = diagnostics or {}
        super().__init__(f"non-finite gradient in {names}")


@dataclass
class AdamState:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v for k, v in self.first_moment.items()}
        out.update({f"v/{k}": v for k, v in self.second_moment.items()})
        return out


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    max_grad_norm: float | None = None,
) -> dict[str, float]:
    """Clip by global norm, then apply one bias-corrected Adam update in place.

    Returns ``{"grad_norm": ..., "clip_scale": ...}``. On a non-finite
    gradient nothing is modified and :class:`NonFiniteGradientError` is raised.
    """
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(bad, {"step_count": state.step_count})

    norm = global_norm(grads)
    scale = 1.0
    if max_grad_norm is not None and norm > max_grad_norm:
        scale = max_grad_norm / norm

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if scale != 1.0:
            g = g * scale
        m = state.first_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        p.data -= (state.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)).astype(p.data.dtype)
    return {"grad_norm": norm, "clip_scale": scale}
