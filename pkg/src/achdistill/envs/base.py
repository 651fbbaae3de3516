from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Hashable, Sequence

import numpy as np


class EnvContractError(RuntimeError):
    """An environment was driven outside its contract (e.g. step after done)."""


@dataclass(frozen=True)
class AchievementGraph:
    """Directed acyclic graph of achievements; edge ``(u, v)``: v needs u."""

    vertices: tuple[str, ...]
    edges: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        vs = set(self.vertices)
        if len(vs) != len(self.vertices):
            raise ValueError("duplicate achievement ids")
        for u, v in self.edges:
            if u not in vs or v not in vs:
                raise ValueError(f"edge ({u}, {v}) references an unknown achievement")
        self.topological_order()

    def __len__(self) -> int:
        return len(self.vertices)

    def index(self, name: str) -> int:
        return self.vertices.index(name)

    def parents(self, name: str) -> list[str]:
        return [u for u, v in self.edges if v == name]

    def ancestors(self, name: str) -> set[str]:
        out: set[str] = set()
        todo = self.parents(name)
        while todo:
            u = todo.pop()
            if u not in out:
                out.add(u)
                todo.extend(self.parents(u))
        return out

    def topological_order(self) -> list[str]:
        indeg = {v: 0 for v in self.vertices}
        for _, v in self.edges:
            indeg[v] += 1
        ready = [v for v in self.vertices if indeg[v] == 0]
        order = []
        while ready:
            u = ready.pop(0)
            order.append(u)
            for a, b in self.edges:
                if a == u:
                    indeg[b] -= 1
                    if indeg[b] == 0:
                        ready.append(b)
        if len(order) != len(self.vertices):
            raise ValueError("achievement graph has a cycle")
        return order

    def to_dict(self) -> dict:
        return {"vertices": list(self.vertices), "edges": [list(e) for e in self.edges]}

    @classmethod
    def from_dict(cls, d: dict) -> "AchievementGraph":
        return cls(tuple(d["vertices"]), tuple(tuple(e) for e in d["edges"]))


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    unlocked: int | None = None
    # set by the vector wrapper when an episode ended and was auto-reset
    final_observation: np.ndarray | None = None
    info: dict[str, Any] = field(default_factory=dict)


class AchievementEnv:
    """Common bookkeeping for achievement MDPs.

    Subclasses implement ``_reset(rng)`` and ``_transition(action)``; the
    latter returns the completed achievement index (or None) and a done flag.
    Rewards come only from here: 1 for a first-time unlock, else 0.
    """

    env_id: str = "base"
    graph: AchievementGraph
    n_actions: int
    observation_shape: tuple[int, ...]

    def __init__(self):
        self.unlocked = np.zeros(0, dtype=bool)
        self.done = True
        self.t = 0
        self.seed: int | None = None

    def params(self) -> dict:
        return {}

    def reset(self, seed: int) -> np.ndarray:
        self.seed = int(seed)
        self.unlocked = np.zeros(len(self.graph), dtype=bool)
        self.t = 0
        self.done = False
        self._reset(np.random.default_rng(self.seed))
        return self.observe()

    def step(self, action: int) -> StepResult:
        if self.done:
            raise EnvContractError("step() called on a finished episode; call reset()")
        action = int(action)
        if not 0 <= action < self.n_actions:
            raise EnvContractError(f"action {action} outside [0, {self.n_actions})")
        completed, done = self._transition(action)
        self.t += 1
        reward = 0.0
        if completed is not None and not self.unlocked[completed]:
            self.unlocked[completed] = True
            reward = 1.0
        if self.t >= self.step_limit:
            done = True
        self.done = done
        return StepResult(self.observe(), reward, done, completed)

    @property
    def unlocked_names(self) -> list[str]:
        return [v for v, u in zip(self.graph.vertices, self.unlocked) if u]

    # -- subclass hooks -----------------------------------------------------
    step_limit: int = 400

    def _reset(self, rng: np.random.Generator) -> None:
        raise NotImplementedError

    def _transition(self, action: int) -> tuple[int | None, bool]:
        raise NotImplementedError

    def observe(self) -> np.ndarray:
        raise NotImplementedError


class SeedStream:
    """Deterministic per-environment episode seeds.

    Episode ``k`` of environment ``i`` gets a seed derived from
    ``(base_seed, i, k)`` so streams are independent of stepping order.
    """

    def __init__(self, base_seed: int):
        self.base_seed = int(base_seed)
        self._counts: dict[int, int] = {}

    def next(self, env_index: int) -> int:
        k = self._counts.get(env_index, 0)
        self._counts[env_index] = k + 1
        ss = np.random.SeedSequence([self.base_seed, env_index, k])
        return int(ss.generate_state(1, dtype=np.uint32)[0])


def check_schedule(schedule: Sequence[tuple[int, Hashable]]) -> None:
    prev = -1
    for t, _ in schedule:
        if t <= prev:
            raise ValueError(f"schedule timesteps must be strictly increasing, got {t} after {prev}")
        prev = t
