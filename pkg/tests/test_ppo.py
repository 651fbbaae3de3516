import numpy as np
import pytest

from achdistill import ndauto as nd
from achdistill.envs import BanditEnv, KeychainEnv, VectorEnv, scripted_env
from achdistill.policy_net import AgentNet
from achdistill.ppo import (
    PpoConfig,
    RolloutState,
    ValueNormalizer,
    collect_rollout,
    compute_gae,
    ppo_losses,
    ppo_update,
)


def gae_oracle(rewards, values, dones, bootstrap, gamma, lam):
    """O(T^2): A_t = sum_l (gamma lam)^l delta_{t+l}, truncated after a done."""
    T = len(rewards)
    v_next = np.append(values[1:], bootstrap)
    delta = rewards + gamma * v_next * (1 - dones) - values
    adv = np.zeros(T)
    for t in range(T):
        acc, w = 0.0, 1.0
        for k in range(t, T):
            acc += w * delta[k]
            if dones[k]:
                break
            w *= gamma * lam
        adv[t] = acc
    return adv


def test_gae_hand_examples():
    adv, tgt = compute_gae([1.0], [0.5], [1], 7.0, 0.95, 0.65)
    assert adv[0] == pytest.approx(0.5) and tgt[0] == pytest.approx(1.0)
    adv, _ = compute_gae([0.0, 1.0], [0.2, 0.5], [0, 1], 0.0, 0.95, 0.65)
    assert adv[0] == pytest.approx(0.58375, abs=1e-12)


def test_gae_lambda_zero_is_td():
    rng = np.random.default_rng(0)
    r, v = rng.standard_normal(20), rng.standard_normal(20)
    d = rng.random(20) < 0.2
    adv, _ = compute_gae(r, v, d, 0.3, 0.9, 0.0)
    delta = r + 0.9 * np.append(v[1:], 0.3) * (1 - d) - v
    np.testing.assert_allclose(adv, delta, atol=1e-14)


@pytest.mark.parametrize("seed", range(100))
def test_gae_matches_quadratic_oracle(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(1, 60))
    r, v = rng.standard_normal(T), rng.standard_normal(T)
    d = (rng.random(T) < 0.15).astype(float)
    b = rng.standard_normal()
    g, lam = rng.uniform(0.5, 1.0), rng.uniform(0.0, 1.0)
    adv, tgt = compute_gae(r, v, d, b, g, lam)
    np.testing.assert_allclose(adv, gae_oracle(r, v, d, b, g, lam), atol=1e-10, rtol=0)
    np.testing.assert_allclose(tgt, adv + v, atol=1e-12)


def test_gae_lambda_one_terminal_equals_discounted_return():
    rng = np.random.default_rng(1)
    for _ in range(20):
        T = int(rng.integers(1, 40))
        r, v = rng.standard_normal(T), rng.standard_normal(T)
        d = np.zeros(T)
        d[-1] = 1
        _, tgt = compute_gae(r, v, d, 123.0, 0.95, 1.0)
        ret = np.zeros(T)
        acc = 0.0
        for t in range(T - 1, -1, -1):
            acc = r[t] + 0.95 * acc
            ret[t] = acc
        np.testing.assert_allclose(tgt, ret, atol=1e-10)


def test_gae_batched_columns_independent():
    rng = np.random.default_rng(2)
    r, v = rng.standard_normal((30, 4)), rng.standard_normal((30, 4))
    d = rng.random((30, 4)) < 0.1
    b = rng.standard_normal(4)
    adv, _ = compute_gae(r, v, d, b, 0.95, 0.65)
    for i in range(4):
        np.testing.assert_allclose(adv[:, i], compute_gae(r[:, i], v[:, i], d[:, i], b[i], 0.95, 0.65)[0], atol=1e-14)


# -- normalizer ---------------------------------------------------------------


def test_normalizer_first_batch_and_ewma():
    n = ValueNormalizer(decay=0.5)
    n.update([0.0, 0.0])
    assert n.mean == 0.0
    n.update([2.0, 2.0])
    assert n.mean == pytest.approx(1.0)


def test_normalizer_constant_fixed_point_and_round_trip():
    n = ValueNormalizer()
    for _ in range(2000):
        n.update([3.0, 3.0])
    assert n.mean == pytest.approx(3.0)
    assert abs(n.normalize(3.0)) < 1e-3
    v = np.random.default_rng(0).standard_normal(10) * 5
    m = ValueNormalizer()
    m.update(v)
    np.testing.assert_allclose(m.denormalize(m.normalize(v)), v, atol=1e-9)
    assert m.std > 0
    with pytest.raises(ValueError):
        m.update([])


def test_value_loss_invariant_to_affine_constants():
    rng = np.random.default_rng(3)
    targets, preds = rng.standard_normal(50) * 4 + 2, rng.standard_normal(50)
    losses = []
    for mu, sq in [(0.0, 1.0), (5.0, 30.0)]:
        n = ValueNormalizer(ewma_mean=mu, ewma_sq=sq, initialized=True)
        # predictions made in normalised space of this normaliser
        p_norm = n.normalize(preds)
        losses.append(np.mean((n.denormalize(p_norm) - targets) ** 2))
    assert losses[0] == pytest.approx(losses[1])


# -- config -------------------------------------------------------------------


def test_config_defaults_and_validation():
    c = PpoConfig()
    assert (c.gamma, c.gae_lambda, c.rollout_length, c.epochs, c.minibatches) == (0.95, 0.65, 4096, 3, 8)
    assert (c.entropy_coef, c.clip_eps, c.learning_rate, c.max_grad_norm, c.value_coef) == (0.01, 0.2, 3e-4, 0.5, 0.5)
    assert c.ewma_decay == 0.99 and c.steps_per_env == 512
    with pytest.raises(ValueError):
        PpoConfig(gamma=1.5)
    with pytest.raises(ValueError):
        PpoConfig(rollout_length=100, n_envs=8)


# -- losses -------------------------------------------------------------------


def _loss_inputs(seed, n=6, dtype=np.float64):
    net = AgentNet((5,), 3, "tiny", seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed)
    obs = rng.standard_normal((n, 5))
    mem = rng.standard_normal((n, net.latent_size))
    acts = rng.integers(3, size=n)
    return net, rng, obs, mem, acts


def test_clip_inactive_at_ratio_one():
    net, rng, obs, mem, acts = _loss_inputs(0)
    cfg = PpoConfig(entropy_coef=0.0, value_coef=0.0)
    with nd.no_grad():
        old = net.heads(net.encode(obs), mem)[0].log_prob(acts).data
    adv = np.abs(rng.standard_normal(len(acts))) + 0.1
    loss, stats = ppo_losses(net, obs, mem, acts, old, adv, np.zeros(len(acts)), cfg)
    g = nd.backward(loss, net.params)
    # unclipped surrogate gradient: -mean(A * grad log pi)
    dist, _ = net.heads(net.encode(obs), mem)
    ref = -(dist.log_prob(acts) * nd.Tensor(adv)).mean()
    g2 = nd.backward(ref, net.params)
    for k in g:
        np.testing.assert_allclose(g[k], g2[k], atol=1e-12)
    assert stats["clip_frac"] == 0


def test_zero_advantage_only_value_and_entropy():
    net, rng, obs, mem, acts = _loss_inputs(1)
    cfg = PpoConfig()
    old = rng.standard_normal(len(acts))
    loss, stats = ppo_losses(net, obs, mem, acts, old, np.zeros(len(acts)), np.ones(len(acts)), cfg)
    assert stats["policy_loss"] == 0.0
    assert float(loss.data) == pytest.approx(cfg.value_coef * stats["value_loss"] - cfg.entropy_coef * stats["entropy"])


def test_clipped_objective_pointwise_below_unclipped():
    rng = np.random.default_rng(4)
    r = np.exp(rng.standard_normal(1000))
    a = rng.standard_normal(1000)
    clipped = np.minimum(r * a, np.clip(r, 0.8, 1.2) * a)
    assert np.all(clipped <= r * a + 1e-15)


@pytest.mark.parametrize("seed", range(20))
def test_ppo_loss_gradcheck(seed):
    net, rng, obs, mem, acts = _loss_inputs(seed, n=4)
    # move off exact-zero biases so no ReLU input sits on its kink
    for p in net.params.values():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    # ratios kept away from the clip kinks at 1 +- eps, some inside, some outside
    with nd.no_grad():
        cur = net.heads(net.encode(obs), mem)[0].log_prob(acts).data
    r = rng.choice([0.6, 0.9, 1.1, 1.4], size=4) * rng.uniform(0.97, 1.03, size=4)
    old = cur - np.log(r)
    adv = rng.standard_normal(4)
    tgt = rng.standard_normal(4)
    cfg = PpoConfig(clip_eps=0.2)
    errs = nd.check_gradients(lambda: ppo_losses(net, obs, mem, acts, old, adv, tgt, cfg)[0], net.params)
    assert max(errs.values()) < 1e-4


# -- rollouts -----------------------------------------------------------------


def _rollout(seed, env_fn, steps=40, profile="tiny", use_memory=True):
    probe = env_fn()
    net = AgentNet(probe.observation_shape, probe.n_actions, profile, seed=seed)
    venv = VectorEnv([env_fn() for _ in range(4)], seed=seed)
    st = RolloutState(venv, use_memory=use_memory)
    return collect_rollout(st, net, steps, ValueNormalizer(), np.random.default_rng(seed)), st


def test_rollout_deterministic():
    (b1, t1), _ = _rollout(0, lambda: KeychainEnv(rooms=3, step_limit=15))
    (b2, t2), _ = _rollout(0, lambda: KeychainEnv(rooms=3, step_limit=15))
    for name in ("observations", "actions", "log_probs", "rewards", "values", "memories"):
        assert np.array_equal(getattr(b1, name), getattr(b2, name))
    assert len(t1) == len(t2) and all(np.array_equal(a.observations, b.observations) for a, b in zip(t1, t2))


def test_rollout_rewards_match_unlock_markers_and_trajectories():
    (b, trajs), st = _rollout(1, lambda: scripted_env([(1, "A"), (3, "B")], episode_length=5), steps=23)
    assert b.rewards.sum() == np.sum(b.unlocked >= 0)
    # four envs, episodes of length 5 over 23 steps -> 4 complete episodes each
    assert len(trajs) == 16
    for tr in trajs:
        assert len(tr) == 5 and list(tr.achievement_steps) == [1, 3]
        assert len(tr.observations) == 6
    assert len(st.fragments[0].actions) == 3


def test_rollout_memory_tracks_last_achievement():
    (b, _), _ = _rollout(2, lambda: scripted_env([(1, "A"), (3, "B")], episode_length=5), steps=10)
    m = np.linalg.norm(b.memories[:, 0], axis=-1)
    # step t uses nu of the achievement completed at t-1; zero at episode start
    np.testing.assert_allclose(m[[0, 1, 2]], [0, 0, 1], atol=1e-5)
    np.testing.assert_allclose(m[[4, 5, 6, 7]], [1, 0, 0, 1], atol=1e-5)
    (b0, _), _ = _rollout(2, lambda: scripted_env([(1, "A"), (3, "B")], episode_length=5), steps=10, use_memory=False)
    assert not np.any(b0.memories)


def test_steps_per_env_from_rollout_length():
    assert PpoConfig(rollout_length=4096, n_envs=8).steps_per_env == 512


def test_bandit_converges():
    cfg = PpoConfig(rollout_length=64, n_envs=8)
    net = AgentNet((4,), 2, "desk_small", seed=0)
    venv = VectorEnv([BanditEnv() for _ in range(8)], seed=0)
    st = RolloutState(venv, use_memory=False, keep_trajectories=False)
    opt, norm, rng = nd.AdamState(learning_rate=cfg.learning_rate), ValueNormalizer(), np.random.default_rng(0)
    for _ in range(20):
        b, _ = collect_rollout(st, net, cfg.steps_per_env, norm, rng)
        stats = ppo_update(net, b, cfg, opt, norm, rng)
    with nd.no_grad():
        p = net.heads(net.encode(np.array([[1.0, 0, 0, 0]])), None)[0].probs.data[0, 0]
    assert p > 0.95
    assert set(stats) >= {"policy_loss", "value_loss", "entropy", "clip_frac", "explained_variance"}
