import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glyphlayout.env import EnvConfig, GlyphEnv
from glyphlayout.policy import ActorCritic
from glyphlayout.ppo import (METRICS_HEADER, PpoConfig, RolloutBuffer, RolloutCollector, clipped_surrogate,
                             collect_rollout, compute_gae, normalize, ppo_loss, train)

SMALL = dict(rollout_horizon=64, minibatch_size=16, epochs_per_update=2)


def make_buffer(rewards, values, dones, truncs=None, term_values=None):
    T = len(rewards)
    buf = RolloutBuffer(T, 1, 1, 1)
    buf.rewards[:, 0] = rewards
    buf.values[:, 0] = values
    buf.dones[:, 0] = dones
    if truncs is not None:
        buf.truncateds[:, 0] = truncs
    if term_values is not None:
        buf.terminal_values[:, 0] = term_values
    buf.pos = T
    return buf


def brute_force_gae(rewards, values, dones, last_value, gamma, lam):
    """A_t = sum_k (gamma*lam)^k delta_{t+k}, truncated at the first episode end."""
    T = len(rewards)
    nxt = list(values[1:]) + [last_value]
    deltas = [rewards[t] + gamma * nxt[t] * (1 - dones[t]) - values[t] for t in range(T)]
    adv = []
    for t in range(T):
        total, coef = 0.0, 1.0
        for k in range(t, T):
            total += coef * deltas[k]
            if dones[k]:
                break
            coef *= gamma * lam
        adv.append(total)
    return np.array(adv)


def test_gae_single_terminal_step():
    buf = compute_gae(make_buffer([2.5], [1.0], [True]), 0.99, 0.95, last_values=7.0)
    assert buf.advantages[0, 0] == 1.5
    assert buf.returns[0, 0] == 2.5


def test_gae_lambda_zero_is_td_residual():
    rng = np.random.default_rng(0)
    r, v, d = rng.normal(size=8), rng.normal(size=8), rng.random(8) < 0.3
    buf = compute_gae(make_buffer(r, v, d), 0.9, 0.0, last_values=0.4)
    nxt = np.append(v[1:], 0.4)
    np.testing.assert_array_equal(buf.advantages[:, 0], r + 0.9 * nxt * (1 - d) - v)


def test_gae_matches_brute_force_random_sequence():
    rng = np.random.default_rng(1)
    r, v, d = rng.normal(size=10), rng.normal(size=10), rng.random(10) < 0.2
    buf = compute_gae(make_buffer(r, v, d), 0.99, 0.95, last_values=0.3)
    np.testing.assert_allclose(buf.advantages[:, 0], brute_force_gae(r, v, d, 0.3, 0.99, 0.95), rtol=0, atol=1e-10)


@settings(max_examples=60)
@given(st.integers(1, 32), st.sampled_from([0.0, 0.5, 0.95, 0.99, 1.0]), st.sampled_from([0.0, 0.5, 0.95, 0.99, 1.0]),
       st.integers(0, 2**32 - 1))
def test_gae_brute_force_grid(T, gamma, lam, seed):
    rng = np.random.default_rng(seed)
    r, v, d = rng.normal(size=T) * 5, rng.normal(size=T), rng.random(T) < 0.25
    last = rng.normal()
    buf = compute_gae(make_buffer(r, v, d), gamma, lam, last_values=last)
    np.testing.assert_allclose(buf.advantages[:, 0], brute_force_gae(r, v, d, last, gamma, lam), rtol=0, atol=1e-10)
    np.testing.assert_array_equal(buf.returns, buf.advantages + buf.values)


def test_truncation_bootstraps_with_terminal_value():
    # one truncated step: delta = r + gamma * V(final) - V(s)
    buf = compute_gae(make_buffer([1.0], [0.5], [False], truncs=[True], term_values=[2.0]), 0.9, 0.95, last_values=100.0)
    assert buf.advantages[0, 0] == pytest.approx(1.0 + 0.9 * 2.0 - 0.5)


def test_surrogate_hand_values():
    assert clipped_surrogate([1.5], [1.0], 0.2) == pytest.approx(-1.2)
    assert clipped_surrogate([0.5], [-1.0], 0.2) == pytest.approx(0.8)


def test_identity_ratio_policy_term_is_zero_after_normalization():
    adv = normalize(np.random.default_rng(0).normal(3, 2, 64))
    assert abs(clipped_surrogate(np.ones(64), adv, 0.2)) < 1e-12


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=64))
def test_normalization_moments(values):
    a = np.array(values)
    if np.std(a) < 1e-3:
        return
    n = normalize(a)
    assert abs(n.mean()) < 1e-9
    assert abs(n.std() - 1) < 1e-6


def test_ppo_loss_first_epoch_policy_term_zero():
    net = ActorCritic.for_env(2, seed=0)
    rng = np.random.default_rng(0)
    obs = rng.uniform(0, 1, (16, 8))
    _, z, lp, v = net.act(obs, rng)
    mb = {"obs": obs, "actions": z, "log_probs": lp, "advantages": normalize(rng.normal(size=16)), "returns": v}
    loss, info = ppo_loss(net, mb, 0.2, 0.5, 0.0)
    assert abs(info["policy_loss"]) < 1e-12
    assert info["value_loss"] == 0.0 and info["clip_fraction"] == 0.0
    assert abs(info["approx_kl"]) < 1e-12


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        PpoConfig(rollout_horizon=100, minibatch_size=64)
    with pytest.raises(ValueError, match="gamma"):
        PpoConfig(gamma=0.0)
    with pytest.raises(ValueError, match="gae_lambda"):
        PpoConfig(gae_lambda=1.5)
    with pytest.raises(ValueError, match="clip_range"):
        PpoConfig(clip_range=0.0)


def test_defaults_match_published_setup():
    c = PpoConfig()
    assert (c.learning_rate, c.rollout_horizon, c.minibatch_size, c.epochs_per_update) == (3e-4, 2048, 64, 10)
    assert (c.gamma, c.gae_lambda, c.clip_range, c.entropy_coef) == (0.99, 0.95, 0.2, 0.0)
    assert (c.vf_coef, c.max_grad_norm, c.normalize_advantages, c.num_envs) == (0.5, 0.5, True, 1)


# -- rollouts ---------------------------------------------------------------------

def test_rollout_with_single_box_env_terminates_every_step():
    env = GlyphEnv(EnvConfig(num_rectan=1), seed=0)
    net = ActorCritic.for_env(1)
    collector = RolloutCollector([env], np.random.default_rng(0))
    buf = collector.collect(net, 4)
    assert buf.full and collector.resets == 4
    assert buf.dones.all() and not buf.truncateds.any()
    np.testing.assert_array_equal(buf.rewards, 10.0)


def test_rollout_rewards_pass_through():
    class Recording(GlyphEnv):
        seen = []

        def step(self, action):
            out = super().step(action)
            self.seen.append(out.reward)
            return out

    env = Recording(EnvConfig(max_steps=5), seed=1)
    buf = collect_rollout([env], ActorCritic.for_env(5), 12, np.random.default_rng(0))
    assert buf.rewards[:, 0].tolist() == Recording.seen
    assert buf.truncateds[:, 0].sum() == 2  # steps 5 and 10 unless an episode succeeded first
    assert np.all(buf.terminal_values[~buf.truncateds] == 0.0)


def test_rollout_determinism():
    def run():
        envs = [GlyphEnv(EnvConfig(max_steps=20), seed=s) for s in (1, 2)]
        buf = collect_rollout(envs, ActorCritic.for_env(5, seed=4), 30, np.random.default_rng(5))
        return buf.obs.tobytes() + buf.actions.tobytes() + buf.rewards.tobytes() + buf.log_probs.tobytes()
    assert run() == run()


def test_per_step_reward_cap():
    buf = collect_rollout([GlyphEnv(EnvConfig(max_steps=50), seed=3)], ActorCritic.for_env(5), 200,
                          np.random.default_rng(0))
    assert buf.rewards.max() <= 10.0


# -- training -----------------------------------------------------------------------

def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_minimal_run_writes_one_row(tmp_path):
    cfg = PpoConfig(total_timesteps=64, **SMALL)
    res = train(EnvConfig(max_steps=30), cfg, tmp_path, seed=0)
    rows = read_rows(res.metrics_path)
    assert len(rows) == 1 and list(rows[0]) == METRICS_HEADER
    assert rows[0]["timestep"] == "64"
    assert (tmp_path / "checkpoints" / "final.json").is_file()


def test_training_is_bit_reproducible(tmp_path):
    cfg = PpoConfig(total_timesteps=192, checkpoint_interval=1, **SMALL)
    for d in ("a", "b"):
        train(EnvConfig(max_steps=40), cfg, tmp_path / d, seed=3)
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
    assert (tmp_path / "a/checkpoints/final.json").read_bytes() == (tmp_path / "b/checkpoints/final.json").read_bytes()
    assert (tmp_path / "a/checkpoints/update_00001.json").is_file()


def test_divergence_keeps_last_good_checkpoint(tmp_path, monkeypatch):
    from glyphlayout import ppo
    from glyphlayout.policy import TrainingDivergenceError

    calls = {"n": 0}
    real = ppo.update_policy

    def flaky(policy, *a, **k):
        calls["n"] += 1
        if calls["n"] == 2:
            policy.params["log_std"][:] = np.nan
            raise TrainingDivergenceError("boom")
        return real(policy, *a, **k)

    monkeypatch.setattr(ppo, "update_policy", flaky)
    with pytest.raises(TrainingDivergenceError):
        train(EnvConfig(max_steps=30), PpoConfig(total_timesteps=192, **SMALL), tmp_path, seed=0)
    good, _ = ActorCritic.load(tmp_path / "checkpoints" / "last_good.json")
    assert all(np.all(np.isfinite(v)) for v in good.params.values())
    assert len(read_rows(tmp_path / "metrics.csv")) == 1


def test_parallel_envs_fill_horizon_per_env():
    res = train(EnvConfig(max_steps=30), PpoConfig(total_timesteps=128, num_envs=2, **SMALL), seed=1)
    assert res.metrics[0]["timestep"] == 128
