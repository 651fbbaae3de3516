from __future__ import annotations

import numpy as np

from .base import AchievementEnv, AchievementGraph


class BanditEnv(AchievementEnv):
    """One-step, single-state bandit: action ``best`` unlocks ``win``."""

    env_id = "bandit"

    def __init__(self, n_actions: int = 2, best: int = 0):
        super().__init__()
        if not 0 <= best < n_actions:
            raise ValueError("best must be a valid action")
        self.n_actions = int(n_actions)
        self.best = int(best)
        self.step_limit = 1
        self.graph = AchievementGraph(("win",))
        self.observation_shape = (4,)

    def params(self) -> dict:
        return {"n_actions": self.n_actions, "best": self.best}

    def _reset(self, rng: np.random.Generator) -> None:
        pass

    def _transition(self, action: int):
        return (0 if action == self.best else None), True

    def observe(self) -> np.ndarray:
        return np.array([1.0, 0.0, 0.0, 0.0], dtype=np.float32)
