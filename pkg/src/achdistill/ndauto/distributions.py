from __future__ import annotations

import numpy as np

from .tensor import Tensor, exp, log_softmax, getitem


class Categorical:
    """Categorical distribution over the last axis of ``logits``.

    All quantities are differentiable through the logits.
    """

    def __init__(self, logits: Tensor):
        if not isinstance(logits, Tensor):
            logits = Tensor(logits)
        if np.isnan(logits.data).any():
            raise ValueError("Categorical: NaN in logits")
        self.logits = logits
        self.log_probs = log_softmax(logits, axis=-1)

    @property
    def probs(self) -> Tensor:
        return exp(self.log_probs)

    @property
    def n_categories(self) -> int:
        return self.logits.shape[-1]

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        p = np.exp(self.log_probs.data)
        p2 = p.reshape(-1, p.shape[-1])
        cdf = np.cumsum(p2, axis=-1)
        u = rng.random((p2.shape[0], 1)) * cdf[:, -1:]
        idx = (u > cdf).sum(axis=-1)
        idx = np.minimum(idx, p2.shape[-1] - 1)
        return idx.reshape(p.shape[:-1])

    def mode(self) -> np.ndarray:
        return np.argmax(self.log_probs.data, axis=-1)

    def log_prob(self, actions) -> Tensor:
        actions = np.asarray(actions, dtype=np.intp)
        if self.log_probs.ndim == 1:
            return getitem(self.log_probs, actions)
        rows = np.arange(actions.shape[0])
        return getitem(self.log_probs, (rows, actions))

    def entropy(self) -> Tensor:
        return -(self.probs * self.log_probs).sum(axis=-1)

    def kl_to(self, other: "Categorical") -> Tensor:
        """KL(self || other), one value per leading index."""
        return (self.probs * (self.log_probs - other.log_probs)).sum(axis=-1)
