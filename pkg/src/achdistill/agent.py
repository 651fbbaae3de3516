"""Estimator-style wrapper around a training run.

``fit`` trains on the configured environment (there is no X/y: the data is
collected by the agent itself). After fitting, ``predict`` / ``predict_proba``
act on observations and ``transform`` returns encoder latents.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from . import ndauto as nd
from .config import RunConfig
from .harness import TrainResult, load_agent, train
from .policy_net import AgentNet


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict) and k in ("ppo", "distill"):
            out.update(_flatten(v, f"{prefix}{k}__"))
        else:
            out[prefix + k] = v
    return out


class Agent:
    """PPO agent with optional achievement distillation.

    Parameters are the fields of :class:`RunConfig`; nested sections use
    ``ppo__learning_rate`` style names, as in scikit-learn pipelines.
    """

    def __init__(self, config: RunConfig | dict | None = None, **params):
        if isinstance(config, RunConfig):
            config = config.to_dict()
        self._config = RunConfig.from_dict(config or {})
        if params:
            self.set_params(**params)

    # -- parameters ------------------------------------------------------------------------
    @property
    def config(self) -> RunConfig:
        return self._config

    def get_params(self, deep: bool = True) -> dict:
        return _flatten(self._config.to_dict())

    def set_params(self, **params) -> "Agent":
        d = self._config.to_dict()
        for key, value in params.items():
            section, _, name = key.partition("__")
            if name:
                if section not in ("ppo", "distill") or name not in d[section]:
                    raise ValueError(f"unknown parameter {key!r}")
                d[section][name] = value
            else:
                if key not in d or key in ("ppo", "distill"):
                    raise ValueError(f"unknown parameter {key!r}")
                d[key] = value
        self._config = RunConfig.from_dict(d)
        return self

    # -- training --------------------------------------------------------------------------
    def fit(self, X=None, y=None, output_dir=None) -> "Agent":
        """Train from scratch; ``X`` and ``y`` are ignored."""
        if output_dir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="achdistill-")
            output_dir = self._tmp.name
        self.result_: TrainResult = train(self._config, output_dir)
        self.net_, _, self.metadata_ = load_agent(self.result_.checkpoint_path)
        return self

    def _check_fitted(self) -> AgentNet:
        net = getattr(self, "net_", None)
        if net is None:
            raise RuntimeError("this Agent is not fitted yet; call fit() or load()")
        return net

    # -- inference -------------------------------------------------------------------------
    def _memory(self, net: AgentNet, n: int, memory):
        if memory is None:
            return np.zeros((n, net.latent_size), dtype=net.dtype)
        return np.asarray(memory, dtype=net.dtype).reshape(n, net.latent_size)

    def predict_proba(self, obs, memory=None) -> np.ndarray:
        """Action probabilities, shape (n, n_actions). ``memory`` defaults to
        the zero sentinel (no previous achievement)."""
        net = self._check_fitted()
        obs = np.asarray(obs)
        with nd.no_grad():
            dist, _, _ = net.forward(obs, self._memory(net, len(obs), memory))
        return np.asarray(dist.probs.data, dtype=np.float64)

    def predict(self, obs, memory=None) -> np.ndarray:
        """Most probable action per observation."""
        return np.argmax(self.predict_proba(obs, memory), axis=1)

    def transform(self, obs) -> np.ndarray:
        """Encoder latents phi(s)."""
        net = self._check_fitted()
        with nd.no_grad():
            return np.asarray(net.encode(np.asarray(obs)).data, dtype=np.float64)

    def score(self, episodes: int = 100, seed: int = 10_000) -> float:
        """Geometric-mean success score of the fitted policy on fresh seeds."""
        from .harness import evaluate

        self._check_fitted()
        return evaluate(self.result_.checkpoint_path, episodes, seed)["score"]

    # -- persistence -----------------------------------------------------------------------
    def save(self, path) -> None:
        self._check_fitted()
        self.net_.save(path, self.metadata_)

    @classmethod
    def load(cls, path) -> "Agent":
        net, config, meta = load_agent(path)
        agent = cls(config)
        agent.net_, agent.metadata_ = net, meta
        agent.result_ = TrainResult(Path(path).parent, None, Path(path), meta["config_hash"], meta["env_steps"],
                                    meta["phase"], None)
        return agent
