"""Run configuration: a typed tree of dataclasses loaded from YAML.

Every key is checked against the dataclass fields, so a typo in a config file
or an ``--override`` fails before anything is allocated.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .distill import DistillConfig
from .envs import ENV_REGISTRY
from .policy_net import PROFILES
from .ppo import PpoConfig

MODES = ("ad", "ppo")


class ConfigError(ValueError):
    """Invalid configuration (unknown key, bad type or out-of-range value)."""


def _default_env_params() -> dict:
    return {"rooms": 3, "room_size": 5, "step_limit": 200}


@dataclass
class RunConfig:
    env: str = "keychain"
    env_params: dict = field(default_factory=_default_env_params)
    profile: str = "desk_small"
    mode: str = "ad"
    total_steps: int = 200_000
    seed: int = 0
    output_dir: str = "runs/default"
    checkpoint_every: int = 1  # outer phases
    trailing_fraction: float = 0.1
    dtype: str = "float32"
    ppo: PpoConfig = field(default_factory=PpoConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.env not in ENV_REGISTRY:
            raise ConfigError(f"unknown env {self.env!r}; known: {sorted(ENV_REGISTRY)}")
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; known: {sorted(PROFILES)}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if int(self.total_steps) < 0:
            raise ConfigError("total_steps must be >= 0")
        if int(self.checkpoint_every) < 0:
            raise ConfigError("checkpoint_every must be >= 0 (0 disables periodic checkpoints)")
        if not 0.0 < self.trailing_fraction <= 1.0:
            raise ConfigError("trailing_fraction must be in (0, 1]")
        if not isinstance(self.env_params, dict):
            raise ConfigError("env_params must be a mapping")
        try:
            self.ppo.validate()
            self.distill.validate()
            self.make_env()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    def make_env(self):
        return ENV_REGISTRY[self.env](**self.env_params)

    # -- derived -----------------------------------------------------------------------
    @property
    def effective_distill(self) -> DistillConfig:
        """The distillation config with ``mode`` applied: ppo-only switches
        off prediction, matching and memory."""
        if self.mode == "ppo":
            return DistillConfig(**{**asdict(self.distill), "use_pred": False, "use_match": False, "use_memory": False})
        return self.distill

    @property
    def trailing_window(self) -> int:
        return max(1, int(round(self.trailing_fraction * self.total_steps)))

    def to_dict(self) -> dict:
        return asdict(self)

    def training_dict(self) -> dict:
        """Everything that influences training, with the mode resolved.

        Two configs with equal training dicts produce identical runs, so
        ``mode: ppo`` and ``mode: ad`` with I, C and M off share a hash.
        """
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("mode")
        d["distill"] = asdict(self.effective_distill)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.training_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    # -- construction ------------------------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = dict(d or {})
        _check_keys(d, [f.name for f in fields(cls)], "")
        sub = {}
        for name, klass in (("ppo", PpoConfig), ("distill", DistillConfig)):
            part = d.pop(name, None) or {}
            if not isinstance(part, dict):
                raise ConfigError(f"{name} must be a mapping")
            _check_keys(part, [f.name for f in fields(klass)], name + ".")
            try:
                sub[name] = klass(**_coerce(klass, part, name + "."))
            except ValueError as e:
                raise ConfigError(str(e)) from None
        return cls(**_coerce(cls, d, ""), **sub)

    @classmethod
    def load(cls, path, overrides=()) -> "RunConfig":
        text = Path(path).read_text()
        try:
            d = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(apply_overrides(d, overrides))

    def with_overrides(self, overrides) -> "RunConfig":
        return RunConfig.from_dict(apply_overrides(self.to_dict(), overrides))

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _check_keys(d: dict, known, prefix: str) -> None:
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")


def _coerce(klass, d: dict, prefix: str) -> dict:
    """Light type checking against field defaults; ints are accepted for floats."""
    out = {}
    defaults = {f.name: f for f in fields(klass)}
    for k, v in d.items():
        f = defaults[k]
        default = f.default_factory() if f.default_factory is not MISSING else f.default
        if isinstance(default, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{prefix}{k} must be true/false, got {v!r}")
        elif isinstance(default, int):
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{prefix}{k} must be an integer, got {v!r}")
        elif isinstance(default, float):
            if isinstance(v, str):  # YAML 1.1 reads "1e-3" as a string
                try:
                    v = float(v)
                except ValueError:
                    pass
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{prefix}{k} must be a number, got {v!r}")
            v = float(v)
        elif isinstance(default, str):
            if not isinstance(v, str):
                raise ConfigError(f"{prefix}{k} must be a string, got {v!r}")
        out[k] = v
    return out


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` strings; values are parsed as YAML scalars."""
    d = copy.deepcopy(d)
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            child = node.get(p)
            if child is None:
                child = node[p] = {}
            if not isinstance(child, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
            node = child
        node[parts[-1]] = value
    return d
