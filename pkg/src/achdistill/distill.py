"""Achievement distillation: next-achievement prediction, cross-episode
achievement matching and the auxiliary phase that optimises them.

Both contrastive losses use one negative per anchor::

    -log( e^{p.a/lam} / (e^{p.a/lam} + e^{n.a/lam}) ) = softplus((n.a - p.a) / lam)

with unit anchors ``a``, positives ``p`` and negatives ``n``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from . import ndauto as nd
from .ndauto import Tensor
from .ot import DEFAULT_ALPHA, cost_matrix, solve_partial_ot, threshold_match
from .policy_net import AgentNet
from .trajectory import Trajectory


@dataclass
class DistillConfig:
    beta_pi: float = 1.0
    beta_v: float = 1.0
    alpha: float = DEFAULT_ALPHA
    n_pi: int = 8
    e_aux: int = 6
    temperature: float = 0.1
    negatives: int = 1
    use_pred: bool = True  # I
    use_match: bool = True  # C
    use_memory: bool = True  # M
    learning_rate: float = 3e-4
    max_grad_norm: float = 0.5
    aux_minibatch_steps: int = 4096
    ot_max_iters: int = 1000
    ot_tol: float = 1e-6
    ot_method: str = "auto"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("alpha", "temperature", "learning_rate", "max_grad_norm", "ot_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("beta_pi", "beta_v"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("n_pi", "e_aux", "aux_minibatch_steps", "ot_max_iters"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.ot_method not in ("auto", "dykstra", "newton"):
            raise ValueError(f"unknown ot_method {self.ot_method!r}")
        if self.negatives != 1:
            raise ValueError("only one negative per anchor is supported")

    @property
    def auxiliary_enabled(self) -> bool:
        return self.use_pred or self.use_match

    @property
    def any_enabled(self) -> bool:
        return self.use_pred or self.use_match or self.use_memory


def config_fields() -> list[str]:
    return [f.name for f in fields(DistillConfig)]


class EpisodeBuffer:
    """Completed episodes from up to ``capacity`` rollouts."""

    def __init__(self, capacity: int = 8):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.trajectories: list[Trajectory] = []
        self.rollouts = 0

    def add_rollout(self, trajectories: Sequence[Trajectory]) -> None:
        if self.rollouts >= self.capacity:
            raise RuntimeError(f"buffer already holds {self.capacity} rollouts; clear it first")
        self.trajectories.extend(trajectories)
        self.rollouts += 1

    def clear(self) -> None:
        self.trajectories = []
        self.rollouts = 0

    @property
    def full(self) -> bool:
        return self.rollouts >= self.capacity

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def n_steps(self) -> int:
        return int(sum(len(t) for t in self.trajectories))

    @property
    def n_achievements(self) -> int:
        return int(sum(t.n_achievements for t in self.trajectories))


# -- contrastive form --------------------------------------------------------------------
def contrastive_loss(anchor: Tensor, positive: Tensor, negative: Tensor, temperature: float) -> Tensor:
    """Mean one-negative InfoNCE over rows of unit vectors."""
    s_pos = (anchor * positive).sum(axis=-1)
    s_neg = (anchor * negative).sum(axis=-1)
    return nd.softplus((s_neg - s_pos) * (1.0 / temperature)).mean()


# -- encoding a group of episodes ---------------------------------------------------------
@dataclass
class EncodedGroup:
    """Latents, achievement representations and memories for a list of
    episodes encoded in one forward pass."""

    trajectories: list
    z: Tensor  # (sum T, h) step latents
    nu: Tensor  # (G, h) one row per achievement, zero rows when degenerate
    memory: Tensor | None  # (sum T, h) or None for the zero sentinel
    actions: np.ndarray
    step_start: np.ndarray  # first step row of each episode
    ach_start: np.ndarray  # first achievement row of each episode
    next_global: np.ndarray  # achievement row of g_t^+ per step, -1 if none
    prev_global: np.ndarray  # achievement row of g_t^- per step, -1 if none

    @property
    def nu_valid(self) -> np.ndarray:
        return np.any(self.nu.data != 0, axis=1)


def encode_group(net: AgentNet, trajectories: Sequence[Trajectory], params=None, use_memory: bool = True) -> EncodedGroup:
    trajectories = list(trajectories)
    lengths = np.array([len(t) for t in trajectories], dtype=np.int64)
    n_ach = np.array([t.n_achievements for t in trajectories], dtype=np.int64)
    obs_start = np.concatenate([[0], np.cumsum(lengths + 1)[:-1]]).astype(np.int64)
    step_start = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)
    ach_start = np.concatenate([[0], np.cumsum(n_ach)[:-1]]).astype(np.int64)

    z_all = net.encode(np.concatenate([t.observations for t in trajectories]), params)
    step_rows = np.concatenate([o + np.arange(n) for o, n in zip(obs_start, lengths)])
    ach_rows = np.concatenate([o + t.achievement_steps for o, t in zip(obs_start, trajectories)]).astype(np.int64)
    z = z_all[step_rows]
    nu = net.nu_from_latents(z_all[ach_rows], z_all[ach_rows + 1])

    def _global(local, start):
        return np.where(local >= 0, local + start, -1)

    next_global = np.concatenate([_global(t.next_index, s) for t, s in zip(trajectories, ach_start)])
    prev_global = np.concatenate([_global(t.prev_index, s) for t, s in zip(trajectories, ach_start)])
    memory = None
    if use_memory and len(ach_rows):
        zero = Tensor(np.zeros((1, net.latent_size), dtype=net.dtype))
        table = nd.concat([nu, zero], axis=0)
        memory = table[np.where(prev_global >= 0, prev_global, len(ach_rows))]
    actions = np.concatenate([t.actions for t in trajectories]).astype(np.int64)
    return EncodedGroup(trajectories, z, nu, memory, actions, step_start, ach_start, next_global, prev_global)


# -- next-achievement prediction ----------------------------------------------------------------
def pred_indices(group: EncodedGroup, rng: np.random.Generator):
    """(step rows, anchor achievement rows, negative step rows) for L_pred.

    Every step with a defined, non-degenerate g_t^+ is an anchor; its
    negative is another step of the same episode drawn uniformly.
    """
    valid_nu = group.nu_valid
    steps, anchors, negs = [], [], []
    for k, traj in enumerate(group.trajectories):
        T = len(traj)
        if traj.n_achievements == 0 or T < 2:
            continue
        s0 = group.step_start[k]
        nxt = group.next_global[s0 : s0 + T]
        ok = nxt >= 0
        ok[ok] = valid_nu[nxt[ok]]
        t = np.flatnonzero(ok)
        if len(t) == 0:
            continue
        # uniform over the other T - 1 steps
        other = rng.integers(0, T - 1, size=len(t))
        other = other + (other >= t)
        steps.append(s0 + t)
        anchors.append(nxt[t])
        negs.append(s0 + other)
    if not steps:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty
    return np.concatenate(steps), np.concatenate(anchors), np.concatenate(negs)


def loss_pred_group(net: AgentNet, group: EncodedGroup, temperature: float, rng: np.random.Generator, params=None):
    """L_pred over an encoded group; ``None`` when there is no valid anchor."""
    steps, anchors, negs = pred_indices(group, rng)
    if len(steps) == 0:
        return None, 0
    rows = np.unique(np.concatenate([steps, negs]))
    pos_in = np.searchsorted(rows, steps)
    neg_in = np.searchsorted(rows, negs)
    memory = None if group.memory is None else group.memory[rows]
    psi = net.state_action_repr(group.z[rows], group.actions[rows], memory, params)
    loss = contrastive_loss(group.nu[anchors], psi[pos_in], psi[neg_in], temperature)
    return loss, len(steps)


def loss_pred(
    net: AgentNet,
    trajectories,
    params=None,
    temperature: float = 0.1,
    rng: np.random.Generator | None = None,
    use_memory: bool = True,
):
    """Next-achievement prediction loss for one episode or a list of them.

    Returns ``(loss, n_anchors)``; the loss is a zero Tensor when no step has
    a usable next achievement.
    """
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    rng = np.random.default_rng(0) if rng is None else rng
    group = encode_group(net, trajectories, params, use_memory)
    loss, n = loss_pred_group(net, group, temperature, rng, params)
    return (Tensor(np.zeros((), dtype=net.dtype)) if loss is None else loss), n


# -- cross-episode matching ---------------------------------------------------------------------
@dataclass
class MatchInfo:
    pairs: list  # (source row, target row) in the filtered sequences
    used: int  # pairs that had a negative
    residual: float
    converged: bool


def match_indices(nu_src: np.ndarray, nu_tgt: np.ndarray, alpha: float, rng: np.random.Generator,
                  max_iters: int = 1000, tol: float = 1e-6, method: str = "auto"):
    """Hard-match two achievement sequences and draw one negative per pair.

    Rows with a zero representation are dropped first. Returns
    ``(anchor rows, positive rows, negative rows, MatchInfo)`` indexed into
    the unfiltered inputs.
    """
    src = np.flatnonzero(np.any(nu_src != 0, axis=1))
    tgt = np.flatnonzero(np.any(nu_tgt != 0, axis=1))
    empty = np.zeros(0, dtype=np.int64)
    if len(src) == 0 or len(tgt) == 0:
        return empty, empty, empty, MatchInfo([], 0, 0.0, True)
    res = solve_partial_ot(cost_matrix(nu_src[src], nu_tgt[tgt]), alpha, max_iters, tol, method=method)
    pairs = threshold_match(res.plan)
    info = MatchInfo(pairs, 0, res.residual, res.converged)
    if len(tgt) < 2 or not pairs:
        return empty, empty, empty, info
    i = np.array([p[0] for p in pairs])
    k = np.array([p[1] for p in pairs])
    j = rng.integers(0, len(tgt) - 1, size=len(k))
    j = j + (j >= k)
    info.used = len(pairs)
    return src[i], tgt[k], tgt[j], info


def loss_match(
    net: AgentNet,
    traj_a: Trajectory,
    traj_b: Trajectory,
    params=None,
    temperature: float = 0.1,
    alpha: float = DEFAULT_ALPHA,
    rng: np.random.Generator | None = None,
    ot_method: str = "auto",
):
    """Matching loss with ``traj_a`` as source and ``traj_b`` as target.

    Returns ``(loss, MatchInfo)``; zero loss when nothing usable is matched.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    group = encode_group(net, [traj_a, traj_b], params, use_memory=False)
    na = traj_a.n_achievements
    nu = group.nu
    a, p, n, info = match_indices(nu.data[:na], nu.data[na:], alpha, rng, method=ot_method)
    if len(a) == 0:
        return Tensor(np.zeros((), dtype=net.dtype)), info
    return contrastive_loss(nu[a], nu[na + p], nu[na + n], temperature), info


# -- policy / value regularisers -------------------------------------------------------------
def regularizer_terms(dist: nd.Categorical, value: Tensor, old_log_probs: np.ndarray, old_values: np.ndarray):
    """(R_pi, R_V) = (mean KL(pi_old || pi), mean 0.5 (V - V_old)^2)."""
    old_lp = np.asarray(old_log_probs, dtype=dist.log_probs.dtype)
    kl = (Tensor(np.exp(old_lp)) * (Tensor(old_lp) - dist.log_probs)).sum(axis=-1).mean()
    rv = (nd.square(value - Tensor(np.asarray(old_values, dtype=value.dtype))) * 0.5).mean()
    return kl, rv


def old_outputs(net: AgentNet, snapshot, trajectories, use_memory: bool = True, chunk_steps: int = 8192):
    """Snapshot log-probabilities and values for every step, per episode.

    The snapshot parameters are used end to end, memories included.
    """
    out = []
    i = 0
    trajectories = list(trajectories)
    with nd.no_grad():
        while i < len(trajectories):
            j, steps = i, 0
            while j < len(trajectories) and (steps == 0 or steps + len(trajectories[j]) <= chunk_steps):
                steps += len(trajectories[j])
                j += 1
            g = encode_group(net, trajectories[i:j], snapshot, use_memory)
            dist, v = net.heads(g.z, g.memory, snapshot)
            lp, vv = dist.log_probs.data, v.data
            for k in range(i, j):
                s0 = g.step_start[k - i]
                T = len(trajectories[k])
                out.append((lp[s0 : s0 + T].copy(), vv[s0 : s0 + T].copy()))
            i = j
    return out


def regularizers(net: AgentNet, trajectories, snapshot, params=None, use_memory: bool = True):
    """(R_pi, R_V) over all steps of ``trajectories`` against ``snapshot``."""
    trajectories = list(trajectories)
    old = old_outputs(net, snapshot, trajectories, use_memory)
    group = encode_group(net, trajectories, params, use_memory)
    dist, v = net.heads(group.z, group.memory, params)
    return regularizer_terms(dist, v, np.concatenate([o[0] for o in old]), np.concatenate([o[1] for o in old]))


# -- auxiliary phase ---------------------------------------------------------------------------------
def _minibatches(items: list, sizes: list[int], target: int) -> list[list]:
    out, cur, n = [], [], 0
    for it, s in zip(items, sizes):
        cur.append(it)
        n += s
        if n >= target:
            out.append(cur)
            cur, n = [], 0
    if cur:
        out.append(cur)
    return out


class AuxiliaryTrainer:
    """Owns the auxiliary optimiser (separate Adam moments) and runs phases."""

    def __init__(self, net: AgentNet, config: DistillConfig):
        self.net = net
        self.config = config
        self.opt = nd.AdamState(learning_rate=config.learning_rate)
        self.phases = 0

    def _step(self, loss: Tensor, stats: dict) -> float:
        if not np.isfinite(loss.data):
            raise nd.NonFiniteGradientError(["aux_loss"], {"stats": stats, "step_count": self.opt.step_count})
        grads = nd.backward(loss, self.net.params)
        return nd.adam_step(self.net.params, grads, self.opt, self.config.max_grad_norm)["grad_norm"]

    def _reg(self, group: EncodedGroup, old, idx):
        dist, v = self.net.heads(group.z, group.memory)
        old_lp = np.concatenate([old[i][0] for i in idx])
        old_v = np.concatenate([old[i][1] for i in idx])
        return regularizer_terms(dist, v, old_lp, old_v)

    def run(self, buffer: EpisodeBuffer, rng: np.random.Generator) -> dict:
        """One auxiliary phase over the buffer; returns summary statistics."""
        cfg, net = self.config, self.net
        stats = {
            "aux_epochs": 0,
            "aux_pred_updates": 0,
            "aux_match_updates": 0,
            "aux_skipped": 0,
            "l_pred": float("nan"),
            "l_match": float("nan"),
            "r_pi": float("nan"),
            "r_v": float("nan"),
            "matched_pairs": 0,
            "match_candidates": 0,
            "ot_max_residual": 0.0,
            "ot_unconverged": 0,
        }
        trajs = buffer.trajectories
        if not cfg.auxiliary_enabled or not trajs:
            return stats
        snapshot = net.snapshot()
        old = old_outputs(net, snapshot, trajs, cfg.use_memory)
        lengths = [len(t) for t in trajs]
        with_ach = [i for i, t in enumerate(trajs) if t.n_achievements > 0]
        acc = {"l_pred": [], "l_match": [], "r_pi": [], "r_v": []}

        for _ in range(cfg.e_aux):
            if cfg.use_pred:
                order = list(rng.permutation(len(trajs)))
                for idx in _minibatches(order, [lengths[i] for i in order], cfg.aux_minibatch_steps):
                    group = encode_group(net, [trajs[i] for i in idx], None, cfg.use_memory)
                    lp, n = loss_pred_group(net, group, cfg.temperature, rng)
                    if lp is None:
                        stats["aux_skipped"] += 1
                        continue
                    r_pi, r_v = self._reg(group, old, idx)
                    loss = lp + cfg.beta_pi * r_pi + cfg.beta_v * r_v
                    self._step(loss, {"l_pred": float(lp.data), "r_pi": float(r_pi.data), "r_v": float(r_v.data)})
                    acc["l_pred"].append(float(lp.data))
                    acc["r_pi"].append(float(r_pi.data))
                    acc["r_v"].append(float(r_v.data))
                    stats["aux_pred_updates"] += 1
            if cfg.use_match and len(with_ach) >= 2:
                order = [with_ach[i] for i in rng.permutation(len(with_ach))]
                pairs = [(order[i], order[i + 1]) for i in range(0, len(order) - 1, 2)]
                sizes = [lengths[a] + lengths[b] for a, b in pairs]
                for chunk in _minibatches(pairs, sizes, cfg.aux_minibatch_steps):
                    idx = [i for p in chunk for i in p]
                    group = encode_group(net, [trajs[i] for i in idx], None, cfg.use_memory)
                    nu = group.nu
                    anchors, positives, negatives = [], [], []
                    for q in range(len(chunk)):
                        ka, kb = 2 * q, 2 * q + 1
                        for src, tgt in ((ka, kb), (kb, ka)):
                            s0, t0 = group.ach_start[src], group.ach_start[tgt]
                            ns, nt = trajs[idx[src]].n_achievements, trajs[idx[tgt]].n_achievements
                            a, p, n, info = match_indices(
                                nu.data[s0 : s0 + ns], nu.data[t0 : t0 + nt], cfg.alpha, rng,
                                cfg.ot_max_iters, cfg.ot_tol, cfg.ot_method,
                            )
                            stats["match_candidates"] += 1
                            stats["matched_pairs"] += info.used
                            stats["ot_max_residual"] = max(stats["ot_max_residual"], info.residual)
                            stats["ot_unconverged"] += int(not info.converged)
                            anchors.append(s0 + a)
                            positives.append(t0 + p)
                            negatives.append(t0 + n)
                    a = np.concatenate(anchors)
                    if len(a) == 0:
                        stats["aux_skipped"] += 1
                        continue
                    lm = contrastive_loss(nu[a], nu[np.concatenate(positives)], nu[np.concatenate(negatives)], cfg.temperature)
                    r_pi, r_v = self._reg(group, old, idx)
                    loss = lm + cfg.beta_pi * r_pi + cfg.beta_v * r_v
                    self._step(loss, {"l_match": float(lm.data), "r_pi": float(r_pi.data), "r_v": float(r_v.data)})
                    acc["l_match"].append(float(lm.data))
                    acc["r_pi"].append(float(r_pi.data))
                    acc["r_v"].append(float(r_v.data))
                    stats["aux_match_updates"] += 1
            stats["aux_epochs"] += 1
        for key, vals in acc.items():
            if vals:
                stats[key] = float(np.mean(vals))
        self.phases += 1
        return stats


def auxiliary_phase(net: AgentNet, buffer: EpisodeBuffer, config: DistillConfig, rng: np.random.Generator,
                    trainer: AuxiliaryTrainer | None = None) -> dict:
    """Convenience wrapper: one auxiliary phase with a (possibly fresh) trainer."""
    trainer = AuxiliaryTrainer(net, config) if trainer is None else trainer
    return trainer.run(buffer, rng)
