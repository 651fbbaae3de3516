"""PPO: rollouts with achievement memory, GAE, EWMA value-target
normalisation and the clipped-surrogate update."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import ndauto as nd
from .envs import VectorEnv
from .ndauto import Tensor
from .policy_net import DEGENERATE_EPS, AgentNet
from .trajectory import Trajectory


@dataclass
class PpoConfig:
    gamma: float = 0.95
    gae_lambda: float = 0.65
    rollout_length: int = 4096
    epochs: int = 3
    minibatches: int = 8
    entropy_coef: float = 0.01
    clip_eps: float = 0.2
    learning_rate: float = 3e-4
    max_grad_norm: float = 0.5
    value_coef: float = 0.5
    ewma_decay: float = 0.99
    n_envs: int = 8
    normalize_advantages: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("gamma", "gae_lambda", "ewma_decay"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        for name in ("rollout_length", "epochs", "minibatches", "n_envs"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.rollout_length % self.n_envs:
            raise ValueError("rollout_length must be divisible by n_envs")
        for name in ("learning_rate", "clip_eps", "max_grad_norm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("entropy_coef", "value_coef"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def steps_per_env(self) -> int:
        return self.rollout_length // self.n_envs


# -- GAE ----------------------------------------------------------------------------
def compute_gae(rewards, values, dones, bootstrap_value, gamma: float, lam: float):
    """Generalised advantage estimates and value targets.

    Arrays are (T,) or (T, N); ``values`` are in return space. ``dones[t]``
    cuts both the bootstrap and the advantage recursion after step ``t``.
    Returns ``(advantages, targets)`` with ``targets = advantages + values``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not (rewards.shape == values.shape == dones.shape):
        raise ValueError("rewards, values and dones must have the same shape")
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_value = np.asarray(bootstrap_value, dtype=np.float64)
    last = np.zeros_like(rewards[0]) if T else 0.0
    for t in range(T - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
        next_value = values[t]
    return adv, adv + values


# -- value normalisation --------------------------------------------------------------
@dataclass
class ValueNormalizer:
    decay: float = 0.99
    eps: float = 1e-8
    ewma_mean: float = 0.0
    ewma_sq: float = 1.0
    initialized: bool = False

    def update(self, targets) -> None:
        x = np.asarray(targets, dtype=np.float64).reshape(-1)
        if x.size == 0:
            raise ValueError("normalizer update needs a non-empty batch")
        m, sq = float(x.mean()), float((x * x).mean())
        if not self.initialized:
            self.ewma_mean, self.ewma_sq, self.initialized = m, sq, True
        else:
            d = self.decay
            self.ewma_mean = d * self.ewma_mean + (1 - d) * m
            self.ewma_sq = d * self.ewma_sq + (1 - d) * sq

    @property
    def mean(self) -> float:
        return self.ewma_mean if self.initialized else 0.0

    @property
    def std(self) -> float:
        if not self.initialized:
            return 1.0
        return float(np.sqrt(max(self.ewma_sq - self.ewma_mean**2, self.eps)))

    def normalize(self, v):
        return (np.asarray(v, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, v):
        return np.asarray(v, dtype=np.float64) * self.std + self.mean

    def state_dict(self) -> dict:
        return {"decay": self.decay, "ewma_mean": self.ewma_mean, "ewma_sq": self.ewma_sq, "initialized": self.initialized}


# -- rollouts ----------------------------------------------------------------------------
@dataclass
class RolloutBatch:
    observations: np.ndarray  # (T, N, *obs)
    actions: np.ndarray  # (T, N)
    log_probs: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray  # V_old in return space
    memories: np.ndarray  # (T, N, h)
    unlocked: np.ndarray  # (T, N), -1 none
    bootstrap_value: np.ndarray  # (N,)
    advantages: np.ndarray | None = None
    targets: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.actions.size

    def finalize(self, gamma: float, lam: float) -> None:
        self.advantages, self.targets = compute_gae(self.rewards, self.values, self.dones, self.bootstrap_value, gamma, lam)

    def flat(self, name: str) -> np.ndarray:
        a = getattr(self, name)
        return a.reshape(a.shape[0] * a.shape[1], *a.shape[2:])


@dataclass
class _Fragment:
    observations: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    unlocked: list = field(default_factory=list)
    seed: int | None = None


class RolloutState:
    """Per-env carry-over between rollouts: current observation, episode
    fragment and the last achievement transition (for the memory)."""

    def __init__(self, venv: VectorEnv, use_memory: bool = True, keep_trajectories: bool = True):
        self.venv = venv
        self.use_memory = use_memory
        self.keep_trajectories = keep_trajectories
        self.obs = venv.reset()
        n = len(venv)
        self.fragments = [_Fragment([self.obs[i]], seed=venv.episode_seeds[i]) for i in range(n)]
        # (s_t, s_{t+1}) of the last achievement in the running episode
        self.last_achievement: list[tuple[np.ndarray, np.ndarray] | None] = [None] * n
        self.episode_returns: list[float] = []
        self.episodes_done = 0


def _nu_rows(z0: np.ndarray, z1: np.ndarray) -> np.ndarray:
    d = z1.astype(np.float64) - z0
    norm = np.sqrt((d * d).sum(-1, keepdims=True))
    out = d / np.sqrt(norm**2 + 1e-8)
    out[norm[:, 0] < DEGENERATE_EPS] = 0.0
    return out


def compute_memories(net: AgentNet, pairs, params=None) -> np.ndarray:
    """nu rows for a list of (s, s') pairs or None (zero sentinel)."""
    h = net.latent_size
    out = np.zeros((len(pairs), h), dtype=net.dtype)
    idx = [i for i, p in enumerate(pairs) if p is not None]
    if idx:
        with nd.no_grad():
            s = np.stack([pairs[i][0] for i in idx])
            s2 = np.stack([pairs[i][1] for i in idx])
            z = net.encode(np.concatenate([s, s2]), params).data
        out[idx] = _nu_rows(z[: len(idx)], z[len(idx) :])
    return out


def collect_rollout(
    state: RolloutState,
    net: AgentNet,
    steps: int,
    normalizer: ValueNormalizer,
    rng: np.random.Generator,
) -> tuple[RolloutBatch, list[Trajectory]]:
    """Collect ``steps`` transitions per environment.

    Returns the batch (values denormalised into return space) and the
    episodes that finished during it, as :class:`Trajectory` objects.
    """
    venv = state.venv
    n = len(venv)
    h = net.latent_size
    obs_shape = venv.observation_shape
    obs_buf = np.zeros((steps, n, *obs_shape), dtype=state.obs.dtype)
    actions = np.zeros((steps, n), dtype=np.int64)
    logps = np.zeros((steps, n))
    values = np.zeros((steps, n))
    rewards = np.zeros((steps, n))
    dones = np.zeros((steps, n), dtype=bool)
    unlocked = np.full((steps, n), -1, dtype=np.int64)
    memories = np.zeros((steps, n, h), dtype=net.dtype)
    finished: list[Trajectory] = []

    # memory under the current parameters
    if state.use_memory:
        mem = compute_memories(net, state.last_achievement)
    else:
        mem = np.zeros((n, h), dtype=net.dtype)
    pending = np.zeros(n, dtype=bool)  # achievement at the previous step
    prev_z = None
    obs = state.obs
    for t in range(steps):
        with nd.no_grad():
            z = net.encode(obs)
            if state.use_memory and pending.any():
                mem = mem.copy()
                mem[pending] = _nu_rows(prev_z[pending], z.data[pending])
            dist, v = net.heads(z, mem)
            a = dist.sample(rng)
            logp = dist.log_prob(a).data
        obs_buf[t] = obs
        actions[t] = a
        logps[t] = logp
        values[t] = normalizer.denormalize(v.data)
        memories[t] = mem
        results = venv.step(a)
        next_obs = np.stack([r.observation for r in results])
        pending = np.zeros(n, dtype=bool)
        for i, r in enumerate(results):
            rewards[t, i] = r.reward
            dones[t, i] = r.done
            unlocked[t, i] = -1 if r.unlocked is None else r.unlocked
            frag = state.fragments[i]
            if state.keep_trajectories:
                frag.actions.append(int(a[i]))
                frag.rewards.append(r.reward)
                frag.unlocked.append(unlocked[t, i])
            else:
                frag.rewards.append(r.reward)
            if r.done:
                state.episodes_done += 1
                state.episode_returns.append(float(sum(frag.rewards)))
                if state.keep_trajectories:
                    frag.observations.append(r.final_observation)
                    finished.append(
                        Trajectory(np.stack(frag.observations), frag.actions, frag.rewards, frag.unlocked, frag.seed)
                    )
                state.fragments[i] = _Fragment([r.observation], seed=venv.episode_seeds[i])
                state.last_achievement[i] = None
                mem[i] = 0.0
            else:
                if state.keep_trajectories:
                    frag.observations.append(r.observation)
                if r.reward > 0 and state.use_memory:
                    state.last_achievement[i] = (obs[i], r.observation)
                    pending[i] = True
        prev_z = z.data
        obs = next_obs

    with nd.no_grad():
        z = net.encode(obs)
        if state.use_memory and pending.any():
            mem = mem.copy()
            mem[pending] = _nu_rows(prev_z[pending], z.data[pending])
        _, v = net.heads(z, mem)
    state.obs = obs
    batch = RolloutBatch(
        obs_buf, actions, logps, rewards, dones, values, memories, unlocked, normalizer.denormalize(v.data)
    )
    return batch, finished


# -- update -----------------------------------------------------------------------------
def ppo_losses(net: AgentNet, obs, memories, actions, old_logp, advantages, norm_targets, config: PpoConfig, params=None):
    """Returns (total loss Tensor, stats dict)."""
    dist, v = net.heads(net.encode(obs, params), memories, params)
    logp = dist.log_prob(actions)
    ratio = nd.exp(logp - Tensor(old_logp.astype(net.dtype)))
    adv = Tensor(advantages.astype(net.dtype))
    surr1 = ratio * adv
    surr2 = nd.clip(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps) * adv
    policy_loss = -nd.minimum(surr1, surr2).mean()
    value_loss = nd.square(v - Tensor(norm_targets.astype(net.dtype))).mean()
    entropy = dist.entropy().mean()
    total = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy
    r = ratio.data
    stats = {
        "policy_loss": float(policy_loss.data),
        "value_loss": float(value_loss.data),
        "entropy": float(entropy.data),
        "clip_frac": float(np.mean(np.abs(r - 1.0) > config.clip_eps)),
        "approx_kl": float(np.mean((r - 1.0) - np.log(r))),
    }
    return total, stats


def explained_variance(pred, target) -> float:
    var = np.var(target)
    return float("nan") if var == 0 else float(1.0 - np.var(target - pred) / var)


def ppo_update(
    net: AgentNet,
    batch: RolloutBatch,
    config: PpoConfig,
    opt: nd.AdamState,
    normalizer: ValueNormalizer,
    rng: np.random.Generator,
) -> dict:
    """E_pi epochs over random minibatch partitions of a finalised batch."""
    if batch.advantages is None:
        batch.finalize(config.gamma, config.gae_lambda)
    normalizer.update(batch.targets)
    obs = batch.flat("observations")
    mem = batch.flat("memories")
    acts = batch.flat("actions")
    old_logp = batch.flat("log_probs")
    adv = batch.flat("advantages")
    if config.normalize_advantages:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    norm_targets = normalizer.normalize(batch.flat("targets"))
    n = len(acts)
    mb = max(1, n // config.minibatches)
    agg: dict[str, list[float]] = {}
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for k in range(config.minibatches):
            idx = perm[k * mb : (k + 1) * mb] if k < config.minibatches - 1 else perm[k * mb :]
            if len(idx) == 0:
                continue
            loss, stats = ppo_losses(net, obs[idx], mem[idx], acts[idx], old_logp[idx], adv[idx], norm_targets[idx], config)
            if not np.isfinite(loss.data):
                raise nd.NonFiniteGradientError(["loss"], {"stats": stats, "step_count": opt.step_count})
            grads = nd.backward(loss, net.params)
            info = nd.adam_step(net.params, grads, opt, config.max_grad_norm)
            stats["grad_norm"] = info["grad_norm"]
            for key, val in stats.items():
                agg.setdefault(key, []).append(val)
    out = {k: float(np.mean(v)) for k, v in agg.items()}
    out["explained_variance"] = explained_variance(batch.flat("values"), batch.flat("targets"))
    return out


def config_fields() -> list[str]:
    return [f.name for f in fields(PpoConfig)]
