"""Episode recordings: a JSON document with a header and per-step records.

Layout (``format_version`` 1)::

    {
      "format": "achdistill-episode",
      "format_version": 1,
      "env": {"id": "keychain", "params": {...}},
      "seed": 123,
      "graph": {"vertices": [...], "edges": [[u, v], ...]},
      "steps": [{"action": 4, "reward": 1.0, "unlocked": 2}, ...],   # -1 = none
      "observations": {"dtype": "uint8", "shape": [T+1, ...], "data": "<base64>"}   # optional
    }

Observations are optional because ``(env, seed, actions)`` replays the
episode exactly.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .base import AchievementGraph

FORMAT = "achdistill-episode"
FORMAT_VERSION = 1


@dataclass
class EpisodeRecording:
    env_id: str
    env_params: dict
    seed: int
    graph: AchievementGraph
    actions: list[int] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    unlocked: list[int] = field(default_factory=list)
    observations: np.ndarray | None = None

    def to_dict(self, include_observations: bool = True) -> dict:
        doc = {
            "format": FORMAT,
            "format_version": FORMAT_VERSION,
            "env": {"id": self.env_id, "params": self.env_params},
            "seed": int(self.seed),
            "graph": self.graph.to_dict(),
            "steps": [
                {"action": int(a), "reward": float(r), "unlocked": int(u)}
                for a, r, u in zip(self.actions, self.rewards, self.unlocked)
            ],
        }
        if include_observations and self.observations is not None:
            obs = np.ascontiguousarray(self.observations)
            doc["observations"] = {
                "dtype": str(obs.dtype),
                "shape": list(obs.shape),
                "data": base64.b64encode(obs.tobytes()).decode("ascii"),
            }
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "EpisodeRecording":
        if doc.get("format") != FORMAT:
            raise ValueError("not an episode recording")
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported recording version {doc.get('format_version')}")
        obs = None
        if "observations" in doc:
            o = doc["observations"]
            obs = np.frombuffer(base64.b64decode(o["data"]), dtype=np.dtype(o["dtype"])).reshape(o["shape"]).copy()
        steps = doc["steps"]
        return cls(
            env_id=doc["env"]["id"],
            env_params=doc["env"]["params"],
            seed=int(doc["seed"]),
            graph=AchievementGraph.from_dict(doc["graph"]),
            actions=[int(s["action"]) for s in steps],
            rewards=[float(s["reward"]) for s in steps],
            unlocked=[int(s["unlocked"]) for s in steps],
            observations=obs,
        )

    def save(self, path, include_observations: bool = True) -> None:
        Path(path).write_text(json.dumps(self.to_dict(include_observations)))

    @classmethod
    def load(cls, path) -> "EpisodeRecording":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replay(self):
        """Re-simulate; returns (observations, rewards) and checks rewards match."""
        from . import make_env

        env = make_env(self.env_id, **self.env_params)
        obs = [env.reset(self.seed)]
        rewards = []
        for a in self.actions:
            res = env.step(a)
            obs.append(res.observation)
            rewards.append(res.reward)
        if rewards != list(self.rewards):
            raise ValueError("replay diverged from the recorded rewards")
        return np.stack(obs), np.asarray(rewards)

    def observations_or_replay(self) -> np.ndarray:
        if self.observations is not None:
            return self.observations
        return self.replay()[0]


def record_episode(env, seed: int, policy, include_observations: bool = True) -> EpisodeRecording:
    """Run ``policy(env, obs) -> action`` for one episode and record it."""
    obs = env.reset(seed)
    rec = EpisodeRecording(env.env_id, env.params(), seed, env.graph)
    frames = [obs]
    while not env.done:
        a = int(policy(env, obs))
        res = env.step(a)
        rec.actions.append(a)
        rec.rewards.append(res.reward)
        rec.unlocked.append(-1 if res.unlocked is None else int(res.unlocked))
        obs = res.observation
        frames.append(obs)
    if include_observations:
        rec.observations = np.stack(frames)
    return rec
