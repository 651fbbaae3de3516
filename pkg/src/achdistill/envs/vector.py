from __future__ import annotations

from typing import Sequence

import numpy as np

from .base import AchievementEnv, SeedStream, StepResult


class VectorEnv:
    """Steps a batch of environments in lock-step with auto-reset.

    Finished environments are reset with the next seed from their own
    stream; the terminal observation is kept in ``final_observation``.
    Results are returned in input order.
    """

    def __init__(self, envs: Sequence[AchievementEnv], seed: int = 0):
        if not envs:
            raise ValueError("VectorEnv needs at least one environment")
        self.envs = list(envs)
        self.seeds = SeedStream(seed)
        self.episode_seeds = [0] * len(self.envs)

    def __len__(self) -> int:
        return len(self.envs)

    @property
    def n_actions(self) -> int:
        return self.envs[0].n_actions

    @property
    def observation_shape(self) -> tuple[int, ...]:
        return tuple(self.envs[0].observation_shape)

    @property
    def graph(self):
        return self.envs[0].graph

    def _reset_one(self, i: int) -> np.ndarray:
        seed = self.seeds.next(i)
        self.episode_seeds[i] = seed
        return self.envs[i].reset(seed)

    def reset(self) -> np.ndarray:
        return np.stack([self._reset_one(i) for i in range(len(self.envs))])

    def step(self, actions: Sequence[int]) -> list[StepResult]:
        actions = np.asarray(actions).reshape(-1)
        if len(actions) != len(self.envs):
            raise ValueError(f"got {len(actions)} actions for {len(self.envs)} environments")
        results = []
        for i, (env, a) in enumerate(zip(self.envs, actions)):
            res = env.step(int(a))
            res.info["seed"] = self.episode_seeds[i]
            if res.done:
                res.final_observation = res.observation
                res.observation = self._reset_one(i)
            results.append(res)
        return results


def vector_step(venv: VectorEnv, actions: Sequence[int]) -> list[StepResult]:
    return venv.step(actions)
