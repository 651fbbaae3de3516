from __future__ import annotations

from typing import Hashable, Sequence

import numpy as np

from .base import AchievementEnv, AchievementGraph, check_schedule


class ScriptedEnv(AchievementEnv):
    """Deterministic fixture whose episodes unlock scheduled achievements.

    The step with index ``t`` (transition ``s_t -> s_{t+1}``) completes the
    achievement scheduled at ``t`` regardless of the action. Observations are
    float vectors: one-hot of the last completed achievement (slot 0 = none),
    elapsed-time fraction, then an optional per-episode distractor vector
    drawn from the reset seed plus optional per-step noise.

    With several ``schedules`` the reset seed picks one per episode.
    """

    env_id = "scripted"

    def __init__(
        self,
        schedule: Sequence[tuple[int, Hashable]] | None = None,
        episode_length: int = 16,
        n_actions: int = 4,
        schedules: Sequence[Sequence[tuple[int, Hashable]]] | None = None,
        vocabulary: Sequence[Hashable] | None = None,
        distractor_dim: int = 0,
        distractor_scale: float = 1.0,
        noise: float = 0.0,
    ):
        super().__init__()
        if schedules is None:
            schedules = [list(schedule or [])]
        elif schedule is not None:
            raise ValueError("pass either schedule or schedules, not both")
        self.schedules = [[(int(t), a) for t, a in s] for s in schedules]
        for s in self.schedules:
            check_schedule(s)
            if s and s[-1][0] >= episode_length:
                raise ValueError("scheduled timestep beyond episode length")
        if vocabulary is None:
            vocabulary = []
            for s in self.schedules:
                for _, a in s:
                    if a not in vocabulary:
                        vocabulary.append(a)
        self.vocabulary = list(vocabulary)
        names = tuple(str(a) for a in self.vocabulary)
        edges: tuple = ()
        if len(self.schedules) == 1:
            firsts = []
            for _, a in self.schedules[0]:
                if str(a) not in firsts:
                    firsts.append(str(a))
            edges = tuple(zip(firsts[:-1], firsts[1:]))
        self.graph = AchievementGraph(names, edges)
        self.episode_length = int(episode_length)
        self.step_limit = self.episode_length
        self.n_actions = int(n_actions)
        self.distractor_dim = int(distractor_dim)
        self.distractor_scale = float(distractor_scale)
        self.noise = float(noise)
        self.observation_shape = (len(self.vocabulary) + 2 + self.distractor_dim,)
        self._index = {a: i for i, a in enumerate(self.vocabulary)}

    def params(self) -> dict:
        return {
            "schedules": [[[t, str(a)] for t, a in s] for s in self.schedules],
            "episode_length": self.episode_length,
            "n_actions": self.n_actions,
            "vocabulary": [str(a) for a in self.vocabulary],
            "distractor_dim": self.distractor_dim,
            "distractor_scale": self.distractor_scale,
            "noise": self.noise,
        }

    def _reset(self, rng: np.random.Generator) -> None:
        self._rng = rng
        self.schedule_index = int(rng.integers(len(self.schedules))) if len(self.schedules) > 1 else 0
        self._by_time = {t: self._index[a] for t, a in self.schedules[self.schedule_index]}
        self._distractor = rng.standard_normal(self.distractor_dim) * self.distractor_scale
        self.last = -1

    def _transition(self, action: int):
        completed = self._by_time.get(self.t)
        if completed is not None:
            self.last = completed
        return completed, False

    def observe(self) -> np.ndarray:
        obs = np.zeros(self.observation_shape, dtype=np.float32)
        obs[self.last + 1] = 1.0
        k = len(self.vocabulary) + 1
        obs[k] = self.t / self.episode_length
        if self.distractor_dim:
            d = self._distractor
            if self.noise:
                d = d + self._rng.standard_normal(self.distractor_dim) * self.noise
            obs[k + 1 :] = d
        return obs


def scripted_env(schedule: Sequence[tuple[int, Hashable]], episode_length: int | None = None, **kwargs) -> ScriptedEnv:
    """Build a :class:`ScriptedEnv` for one fixed schedule."""
    check_schedule(schedule)
    if episode_length is None:
        episode_length = (schedule[-1][0] + 2) if schedule else 1
    return ScriptedEnv(schedule=schedule, episode_length=episode_length, **kwargs)
