"""PPO with achievement distillation on achievement-structured environments.

Public entry points: :class:`Agent` (estimator-style training wrapper),
:class:`RunConfig`, :func:`train`, the optimal-transport matcher
:func:`solve_partial_ot` and :class:`LinearProbe`.
"""

from .agent import Agent
from .config import ConfigError, RunConfig
from .distill import DistillConfig
from .harness import TrainingAborted, evaluate, probe, read_metrics, train
from .metrics import SuccessRateTracker, score
from .ot import hungarian_match, solve_partial_ot, threshold_match
from .policy_net import AgentNet
from .ppo import PpoConfig
from .probe import LinearProbe

__version__ = "0.1.0"

__all__ = [
    "Agent",
    "AgentNet",
    "ConfigError",
    "DistillConfig",
    "LinearProbe",
    "PpoConfig",
    "RunConfig",
    "SuccessRateTracker",
    "TrainingAborted",
    "evaluate",
    "hungarian_match",
    "probe",
    "read_metrics",
    "score",
    "solve_partial_ot",
    "threshold_match",
    "train",
]
