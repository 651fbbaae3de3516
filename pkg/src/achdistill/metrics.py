"""Success rates, the geometric-mean score and a trailing-window tracker."""

from __future__ import annotations

from collections import deque
from typing import Iterable, Sequence

import numpy as np


def score(success_rates: Sequence[float]) -> float:
    """``exp(mean(log(1 + s_i))) - 1`` over rates in percent."""
    s = np.asarray(success_rates, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("score needs a non-empty list of success rates")
    if np.any(~np.isfinite(s)) or np.any(s < 0) or np.any(s > 100):
        raise ValueError(f"success rates must lie in [0, 100], got {s}")
    # clipped: exp(log(101)) - 1 rounds to 100.00000000000003
    return float(np.clip(np.expm1(np.mean(np.log1p(s))), 0.0, 100.0))


def success_rates(unlocked_per_episode: Iterable[Iterable[int]], n_achievements: int) -> np.ndarray | None:
    """Percent of episodes unlocking each achievement; None without episodes."""
    counts = np.zeros(n_achievements)
    n = 0
    for ids in unlocked_per_episode:
        got = np.zeros(n_achievements, dtype=bool)
        for i in ids:
            if i >= 0:
                got[int(i)] = True
        counts += got
        n += 1
    if n == 0:
        return None
    return 100.0 * counts / n


class SuccessRateTracker:
    """Accumulates finished episodes.

    Keeps all-episode counts and a trailing window of episodes that ended
    within the last ``window_steps`` environment steps.
    """

    def __init__(self, achievement_names: Sequence[str], window_steps: int):
        self.names = list(achievement_names)
        self.window_steps = int(window_steps)
        self.counts = np.zeros(len(self.names))
        self.episodes = 0
        self.return_sum = 0.0
        self._recent: deque = deque()  # (end_step, unlocked bool array, return)

    @property
    def n_achievements(self) -> int:
        return len(self.names)

    def add_episode(self, unlocked_ids: Iterable[int], episode_return: float, end_step: int) -> None:
        got = np.zeros(self.n_achievements, dtype=bool)
        for i in unlocked_ids:
            if i >= 0:
                got[int(i)] = True
        self.counts += got
        self.episodes += 1
        self.return_sum += float(episode_return)
        self._recent.append((int(end_step), got, float(episode_return)))

    def add_trajectory(self, trajectory, end_step: int) -> None:
        self.add_episode(trajectory.unlocked, trajectory.total_reward, end_step)

    def _trim(self, now: int) -> None:
        while self._recent and self._recent[0][0] <= now - self.window_steps:
            self._recent.popleft()

    def rates(self) -> np.ndarray | None:
        return None if self.episodes == 0 else 100.0 * self.counts / self.episodes

    def trailing_rates(self, now: int) -> np.ndarray | None:
        self._trim(now)
        if not self._recent:
            return None
        return 100.0 * np.mean([g for _, g, _ in self._recent], axis=0)

    def trailing_reward(self, now: int) -> float | None:
        self._trim(now)
        if not self._recent:
            return None
        return float(np.mean([r for _, _, r in self._recent]))

    def mean_reward(self) -> float | None:
        return None if self.episodes == 0 else self.return_sum / self.episodes

    def score(self) -> float | None:
        r = self.rates()
        return None if r is None else score(r)

    def trailing_score(self, now: int) -> float | None:
        r = self.trailing_rates(now)
        return None if r is None else score(r)
