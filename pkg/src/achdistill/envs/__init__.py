"""Achievement MDPs: the keychain gridworld and a scripted test fixture."""

from .base import AchievementEnv, AchievementGraph, EnvContractError, SeedStream, StepResult
from .keychain import KeychainEnv, KeychainExpert
from .scripted import ScriptedEnv, scripted_env
from .bandit import BanditEnv
from .vector import VectorEnv, vector_step
from .recording import EpisodeRecording, record_episode

ENV_REGISTRY = {
    "keychain": KeychainEnv,
    "scripted": ScriptedEnv,
    "bandit": BanditEnv,
}


def make_env(env_id: str, **params) -> AchievementEnv:
    try:
        cls = ENV_REGISTRY[env_id]
    except KeyError:
        raise ValueError(f"unknown environment {env_id!r}; known: {sorted(ENV_REGISTRY)}") from None
    return cls(**params)


__all__ = [
    "AchievementEnv",
    "AchievementGraph",
    "EnvContractError",
    "SeedStream",
    "StepResult",
    "KeychainEnv",
    "KeychainExpert",
    "ScriptedEnv",
    "scripted_env",
    "BanditEnv",
    "VectorEnv",
    "vector_step",
    "EpisodeRecording",
    "record_episode",
    "ENV_REGISTRY",
    "make_env",
]
