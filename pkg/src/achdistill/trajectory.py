from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def index_achievements(rewards) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Achievement steps and per-step next/previous achievement indices.

    With achievement steps ``t_1 < ... < t_m`` (the steps with reward 1):
    ``next_index[t] = min{i | t <= t_i}`` and ``prev_index[t] = max{i | t > t_i}``,
    both zero-based, ``-1`` when undefined (no later achievement / sentinel).
    """
    rewards = np.asarray(rewards)
    steps = np.flatnonzero(rewards > 0.5)
    t = np.arange(len(rewards))
    pos = np.searchsorted(steps, t, side="left")
    next_index = np.where(pos < len(steps), pos, -1)
    prev_index = pos - 1
    return steps, next_index, prev_index


@dataclass
class Trajectory:
    """One complete episode: ``T`` transitions and ``T + 1`` observations."""

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    unlocked: np.ndarray  # achievement id per step, -1 if none
    seed: int | None = None
    achievement_steps: np.ndarray = field(init=False)
    next_index: np.ndarray = field(init=False)
    prev_index: np.ndarray = field(init=False)

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.unlocked = np.asarray(self.unlocked, dtype=np.int64)
        if len(self.observations) != len(self.actions) + 1:
            raise ValueError("a trajectory needs len(actions) + 1 observations")
        self.achievement_steps, self.next_index, self.prev_index = index_achievements(self.rewards)

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def n_achievements(self) -> int:
        return len(self.achievement_steps)

    @property
    def achievement_ids(self) -> np.ndarray:
        """Environment achievement id of each g_i (for ground-truth labels)."""
        return self.unlocked[self.achievement_steps]

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())

    @classmethod
    def from_recording(cls, rec) -> "Trajectory":
        return cls(rec.observations_or_replay(), rec.actions, rec.rewards, rec.unlocked, rec.seed)
