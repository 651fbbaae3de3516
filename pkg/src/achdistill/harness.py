"""Training loop (PPO phases interleaved with achievement distillation),
metrics stream, checkpoints and the offline eval / probe / matching tools."""

from __future__ import annotations

import csv
import io
import json
import logging
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ndauto as nd
from .config import RunConfig
from .distill import AuxiliaryTrainer, EpisodeBuffer
from .envs import EpisodeRecording, KeychainEnv, KeychainExpert, VectorEnv, record_episode
from .metrics import SuccessRateTracker
from .ot import DEFAULT_ALPHA, cost_matrix, hungarian_match, solve_partial_ot, threshold_match
from .policy_net import AgentNet
from .ppo import RolloutState, ValueNormalizer, collect_rollout, ppo_update
from .probe import ProbeResult, run_probe
from .trajectory import Trajectory

log = logging.getLogger("achdistill")

METRICS_VERSION = 1
METRICS_MAGIC = f"# achdistill-metrics v{METRICS_VERSION}"

PPO_STATS = ("policy_loss", "value_loss", "entropy", "clip_frac", "approx_kl", "grad_norm", "explained_variance")
AUX_STATS = (
    "aux_epochs",
    "aux_pred_updates",
    "aux_match_updates",
    "aux_skipped",
    "l_pred",
    "l_match",
    "r_pi",
    "r_v",
    "matched_pairs",
    "match_candidates",
    "ot_max_residual",
    "ot_unconverged",
)
BASE_COLUMNS = (
    "env_steps",
    "phase",
    "rollout",
    "phase_rollout",
    "buffer_rollouts",
    "episodes",
    "score",
    "trailing_score",
    "mean_reward",
    "trailing_reward",
)


class TrainingAborted(RuntimeError):
    """A module aborted training; ``bundle`` holds the diagnostics."""

    def __init__(self, message: str, bundle: dict, path: Path | None = None):
        super().__init__(message)
        self.bundle = bundle
        self.path = path


# -- metrics file ------------------------------------------------------------------------
def metrics_columns(achievement_names: Sequence[str]) -> list[str]:
    return (
        list(BASE_COLUMNS)
        + list(PPO_STATS)
        + list(AUX_STATS)
        + [f"rate:{n}" for n in achievement_names]
        + [f"trailing_rate:{n}" for n in achievement_names]
    )


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))  # shortest round-trip form, so parsing back is exact


class MetricsWriter:
    """Append-only CSV: a version line, the column header, one row per rollout."""

    def __init__(self, path, achievement_names: Sequence[str]):
        self.path = Path(path)
        self.columns = metrics_columns(achievement_names)
        with open(self.path, "w", newline="") as f:
            f.write(METRICS_MAGIC + "\n")
            csv.writer(f, lineterminator="\n").writerow(self.columns)

    def write(self, row: dict) -> None:
        unknown = set(row) - set(self.columns)
        if unknown:
            raise KeyError(f"unknown metrics columns {sorted(unknown)}")
        with open(self.path, "a", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow([_fmt(row.get(c)) for c in self.columns])


def read_metrics(path) -> tuple[list[str], list[dict]]:
    """Columns and rows of a metrics file; empty cells become None."""
    text = Path(path).read_text()
    first, _, rest = text.partition("\n")
    if first.strip() != METRICS_MAGIC:
        raise ValueError(f"{path}: not a v{METRICS_VERSION} metrics file")
    reader = csv.reader(io.StringIO(rest))
    columns = next(reader)
    rows = []
    for rec in reader:
        row = {}
        for c, s in zip(columns, rec):
            if s == "":
                row[c] = None
            elif c in ("env_steps", "phase", "rollout", "phase_rollout", "buffer_rollouts", "episodes"):
                row[c] = int(s)
            else:
                row[c] = float(s)
        rows.append(row)
    return columns, rows


def achievement_names_from_columns(columns: Sequence[str]) -> list[str]:
    return [c[len("rate:") :] for c in columns if c.startswith("rate:")]


# -- training -----------------------------------------------------------------------------
@dataclass
class TrainResult:
    output_dir: Path
    metrics_path: Path
    checkpoint_path: Path
    config_hash: str
    env_steps: int
    phases: int
    final_row: dict | None


def _tracker_row(tracker: SuccessRateTracker, steps: int) -> dict:
    row = {
        "episodes": tracker.episodes,
        "score": tracker.score(),
        "trailing_score": tracker.trailing_score(steps),
        "mean_reward": tracker.mean_reward(),
        "trailing_reward": tracker.trailing_reward(steps),
    }
    rates = tracker.rates()
    trailing = tracker.trailing_rates(steps)
    for i, name in enumerate(tracker.names):
        row[f"rate:{name}"] = None if rates is None else rates[i]
        row[f"trailing_rate:{name}"] = None if trailing is None else trailing[i]
    return row


def _save(net: AgentNet, path: Path, config: RunConfig, normalizer: ValueNormalizer, steps: int, phase: int, names):
    meta = {
        "kind": "agent",
        "run_config": config.to_dict(),
        "config_hash": config.config_hash(),
        "env_steps": int(steps),
        "phase": int(phase),
        "value_normalizer": normalizer.state_dict(),
        "achievements": list(names),
    }
    net.save(path, meta)


def train(config: RunConfig, output_dir=None, on_row: Callable[[dict], None] | None = None) -> TrainResult:
    """Algorithm 1: reset the buffer, run N_pi rollouts each followed by PPO
    epochs, then E_aux auxiliary iterations; repeat until the step budget.

    The budget is rounded up to whole rollouts. An auxiliary phase only runs
    after a complete set of N_pi rollouts.
    """
    config.validate()
    out = Path(output_dir if output_dir is not None else config.output_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    config.dump(out / "config.yaml")
    chash = config.config_hash()
    pcfg = config.ppo
    dcfg = config.effective_distill

    venv = VectorEnv([config.make_env() for _ in range(pcfg.n_envs)], seed=config.seed)
    names = list(venv.graph.vertices)
    net = AgentNet(venv.observation_shape, venv.n_actions, config.profile, seed=config.seed, dtype=np.dtype(config.dtype))
    normalizer = ValueNormalizer(pcfg.ewma_decay)
    opt = nd.AdamState(learning_rate=pcfg.learning_rate)
    policy_rng = np.random.default_rng([config.seed, 0])
    aux_rng = np.random.default_rng([config.seed, 1])
    trainer = AuxiliaryTrainer(net, dcfg) if dcfg.auxiliary_enabled else None
    buffer = EpisodeBuffer(dcfg.n_pi)
    tracker = SuccessRateTracker(names, config.trailing_window)
    writer = MetricsWriter(out / "metrics.csv", names)
    ckpt_dir = out / "checkpoints"
    _save(net, ckpt_dir / "initial.ckpt", config, normalizer, 0, 0, names)

    steps, phase, rollout = 0, 0, 0
    last = {"ppo": None, "aux": None}
    row = None
    try:
        state = RolloutState(venv, use_memory=dcfg.use_memory, keep_trajectories=True)
        while steps < config.total_steps:
            phase += 1
            buffer.clear()
            for k in range(dcfg.n_pi):
                if steps >= config.total_steps:
                    break
                batch, finished = collect_rollout(state, net, pcfg.steps_per_env, normalizer, policy_rng)
                steps += batch.size
                rollout += 1
                for traj in finished:
                    tracker.add_trajectory(traj, steps)
                buffer.add_rollout(finished)
                last["ppo"] = ppo_update(net, batch, pcfg, opt, normalizer, policy_rng)
                row = {"env_steps": steps, "phase": phase, "rollout": rollout, "phase_rollout": k + 1,
                       "buffer_rollouts": buffer.rollouts}
                row.update({key: last["ppo"].get(key) for key in PPO_STATS})
                if trainer is not None and buffer.full:
                    last["aux"] = trainer.run(buffer, aux_rng)
                    row.update({key: last["aux"][key] for key in AUX_STATS})
                row.update(_tracker_row(tracker, steps))
                writer.write(row)
                if on_row is not None:
                    on_row(row)
                log.info("steps=%d phase=%d score=%s", steps, phase, row["trailing_score"])
            if config.checkpoint_every and phase % config.checkpoint_every == 0:
                _save(net, ckpt_dir / f"phase_{phase:04d}.ckpt", config, normalizer, steps, phase, names)
    except Exception as e:  # any module abort
        bundle = {
            "config_hash": chash,
            "env_steps": steps,
            "phase": phase,
            "rollout": rollout,
            "last_losses": last,
            "error_type": type(e).__name__,
            "error": str(e),
            "diagnostics": getattr(e, "diagnostics", None),
            "traceback": traceback.format_exc(),
        }
        path = out / "diagnostics.json"
        path.write_text(json.dumps(bundle, indent=2, default=_json_default))
        raise TrainingAborted(f"training aborted at step {steps}: {type(e).__name__}: {e}", bundle, path) from e

    final = ckpt_dir / "final.ckpt"
    _save(net, final, config, normalizer, steps, phase, names)
    return TrainResult(out, out / "metrics.csv", final, chash, steps, phase, row)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    return repr(o)


# -- checkpoints --------------------------------------------------------------------------
def load_agent(path) -> tuple[AgentNet, RunConfig, dict]:
    net, meta = AgentNet.load(path)
    if meta.get("kind") != "agent":
        raise ValueError(f"{path}: not an agent checkpoint")
    return net, RunConfig.from_dict(meta["run_config"]), meta


def collect_agent_episodes(net: AgentNet, config: RunConfig, episodes: int, seed: int) -> list[Trajectory]:
    """Finished episodes from the stochastic policy, in completion order."""
    n_envs = max(1, min(config.ppo.n_envs, episodes))
    venv = VectorEnv([config.make_env() for _ in range(n_envs)], seed=seed)
    state = RolloutState(venv, use_memory=config.effective_distill.use_memory, keep_trajectories=True)
    rng = np.random.default_rng([seed, 2])
    normalizer = ValueNormalizer()
    out: list[Trajectory] = []
    while len(out) < episodes:
        _, finished = collect_rollout(state, net, 64, normalizer, rng)
        out.extend(finished)
    return out[:episodes]


def evaluate(checkpoint, episodes: int = 100, seed: int = 10_000) -> dict:
    """Success rates and score of a checkpoint's policy on fresh seeds."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    net, config, meta = load_agent(checkpoint)
    trajs = collect_agent_episodes(net, config, episodes, seed)
    tracker = SuccessRateTracker(meta["achievements"], window_steps=1)
    for t in trajs:
        tracker.add_trajectory(t, 0)
    rates = tracker.rates()
    return {
        "episodes": len(trajs),
        "env_steps_trained": meta["env_steps"],
        "score": tracker.score(),
        "mean_reward": tracker.mean_reward(),
        "success_rates": dict(zip(tracker.names, map(float, rates))),
    }


def probe_episodes(config: RunConfig, episodes: int, policy: str, seed: int, net: AgentNet | None = None) -> list[Trajectory]:
    """Episodes for the probe dataset: ``expert`` (keychain only), ``random``
    or ``agent`` (the checkpoint's own policy)."""
    if policy == "agent":
        if net is None:
            raise ValueError("policy 'agent' needs a network")
        return collect_agent_episodes(net, config, episodes, seed)
    env = config.make_env()
    rng = np.random.default_rng([seed, 3])
    if policy == "expert":
        if not isinstance(env, KeychainEnv):
            raise ValueError("the expert policy exists only for keychain")
        expert = KeychainExpert(epsilon=0.1, seed=seed)
        act = lambda e, o: expert.act(e)  # noqa: E731
    elif policy == "random":
        act = lambda e, o: int(rng.integers(e.n_actions))  # noqa: E731
    else:
        raise ValueError(f"unknown probe policy {policy!r}")
    return [Trajectory.from_recording(record_episode(env, seed + i, act)) for i in range(episodes)]


def probe(checkpoint, episodes: int = 200, policy: str = "expert", n_train: int = 50_000, n_test: int = 10_000,
          epochs: int = 500, learning_rate: float = 1e-3, seed: int = 20_000) -> ProbeResult:
    net, config, _ = load_agent(checkpoint)
    trajs = probe_episodes(config, episodes, policy, seed, net)
    return run_probe(net, trajs, n_train, n_test, seed=seed, epochs=epochs, learning_rate=learning_rate)


# -- matching demo --------------------------------------------------------------------------
def achievement_vectors(net: AgentNet, traj: Trajectory) -> np.ndarray:
    """nu of every achievement in an episode (rows of zeros if degenerate)."""
    idx = traj.achievement_steps
    if len(idx) == 0:
        return np.zeros((0, net.latent_size))
    with nd.no_grad():
        z0 = net.encode(traj.observations[idx])
        z1 = net.encode(traj.observations[idx + 1])
        return net.nu_from_latents(z0, z1).data.astype(np.float64)


def match_episodes(net: AgentNet, source: Trajectory, target: Trajectory, alpha: float = DEFAULT_ALPHA) -> dict:
    """Cost matrix, entropic partial plan, hard matching and, for reference,
    the Hungarian assignment between the achievements of two episodes."""
    a, b = achievement_vectors(net, source), achievement_vectors(net, target)
    M = cost_matrix(a, b)
    res = solve_partial_ot(M, alpha)
    pairs = threshold_match(res.plan)
    return {
        "source_achievements": source.achievement_ids.tolist(),
        "target_achievements": target.achievement_ids.tolist(),
        "cost": M,
        "plan": res.plan,
        "matching": pairs,
        "hungarian": hungarian_match(M) if M.size else [],
        "converged": res.converged,
        "residual": res.residual,
        "label_matching": [
            (i, k)
            for i, gi in enumerate(source.achievement_ids)
            for k, gk in enumerate(target.achievement_ids)
            if gi == gk
        ],
    }


def load_recording_trajectory(path) -> tuple[Trajectory, "EpisodeRecording"]:
    rec = EpisodeRecording.load(path)
    return Trajectory.from_recording(rec), rec
