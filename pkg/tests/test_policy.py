import math
from decimal import Decimal, getcontext

import numpy as np
import pytest

from glyphlayout import policy as pol
from glyphlayout.policy import (ActorCritic, Adam, TrainingDivergenceError, clip_grad_norm, gaussian_entropy,
                                sample_action)


def small_net(seed, obs_dim=4, act_dim=4, hidden=(8, 8)):
    rng = np.random.default_rng(seed)
    net = ActorCritic(obs_dim, act_dim, hidden, seed=seed)
    for k, v in net.params.items():
        net.params[k] = rng.normal(0, 0.5, v.shape)
    net.params["log_std"] = rng.uniform(-1.0, 0.5, act_dim)
    return net


def decimal_forward(params, prefix, n_layers, x):
    """Reference forward pass in 50-digit decimal arithmetic."""
    getcontext().prec = 50
    h = [Decimal(float(v)) for v in x]
    for i in range(n_layers):
        W = params[f"{prefix}.W{i}"]
        b = params[f"{prefix}.b{i}"]
        out = []
        for j in range(W.shape[1]):
            s = Decimal(float(b[j]))
            for k in range(W.shape[0]):
                s += h[k] * Decimal(float(W[k, j]))
            if i < n_layers - 1:
                e2 = (2 * s).exp()
                s = (e2 - 1) / (e2 + 1)
            out.append(s)
        h = out
    return np.array([float(v) for v in h])


# -- forward -----------------------------------------------------------------

def test_zero_weights_give_zero_mean():
    net = ActorCritic.for_env(5)
    for k in net.params:
        net.params[k][...] = 0.0
    mean, log_std = net.forward_actor(np.random.default_rng(0).uniform(0, 1, 20))
    np.testing.assert_array_equal(mean, 0.0)
    np.testing.assert_array_equal(log_std, 0.0)


def test_forward_is_pure():
    net = ActorCritic.for_env(5, seed=3)
    obs = np.random.default_rng(1).uniform(0, 1, 20)
    a = net.forward_actor(obs)
    b = net.forward_actor(obs)
    np.testing.assert_array_equal(a[0], b[0])


def test_forward_matches_decimal_reference():
    net = ActorCritic.for_env(5, seed=7)
    rng = np.random.default_rng(2)
    for k in net.params:
        net.params[k] = rng.normal(0, 0.3, net.params[k].shape)
    obs = rng.uniform(0, 1, 20)
    mean, _ = net.forward_actor(obs)
    ref = decimal_forward(net.params, "actor", 3, obs)
    np.testing.assert_allclose(mean, ref, rtol=0, atol=1e-12)
    v = net.value(obs)
    assert abs(v - decimal_forward(net.params, "critic", 3, obs)[0]) < 1e-12


def test_dimension_mismatch():
    net = ActorCritic.for_env(5)
    with pytest.raises(ValueError, match="dimension"):
        net.forward_actor(np.zeros(16))
    with pytest.raises(ValueError, match="dimension"):
        net.evaluate(np.zeros(20), np.zeros(16))


def test_parameter_count_and_layout():
    net = ActorCritic.for_env(5)
    assert net.actor.dims == [20, 64, 64, 20]
    assert net.critic.dims == [20, 64, 64, 1]
    assert net.n_params == (20 * 64 + 64 + 64 * 64 + 64 + 64 * 20 + 20) + (20 * 64 + 64 + 64 * 64 + 64 + 64 + 1) + 20
    np.testing.assert_array_equal(net.params["log_std"], 0.0)


# -- sampling ----------------------------------------------------------------

def test_zero_variance_limit_is_tanh_mean():
    mean = np.array([0.3, -2.0, 5.0, 0.0])
    action, _, _ = sample_action(mean, np.full(4, -1e9), np.random.default_rng(0))
    np.testing.assert_allclose(action, np.tanh(mean), rtol=0, atol=1e-8)


def test_density_at_mean():
    mean = np.array([0.1, -0.4, 0.7])
    log_std = np.array([-0.5, 0.0, 0.3])
    _, log_prob, z = sample_action(mean, log_std, noise=np.zeros(3))
    gauss = log_prob + pol.squash_correction(z)
    assert gauss == pytest.approx(-np.sum(log_std + 0.5 * math.log(2 * math.pi)), abs=1e-14)


def phi(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def fd_squashed_density(a, mean, std, h=1e-6):
    """Per-component density of tanh(z) from finite differences of its CDF."""
    dens = 1.0
    for ai, mi, si in zip(a, mean, std):
        F = lambda x: phi((math.atanh(x) - mi) / si)
        dens *= (F(ai + h) - F(ai - h)) / (2 * h)
    return dens


def test_log_prob_matches_change_of_variables(monkeypatch):
    # The boundary guard inside the log is switched off so the check is exact.
    monkeypatch.setattr(pol, "SQUASH_EPS", 0.0)
    rng = np.random.default_rng(5)
    for _ in range(20):
        mean = rng.uniform(-0.5, 0.5, 2)
        log_std = rng.uniform(-1.0, -0.3, 2)
        action, log_prob, _ = sample_action(mean, log_std, rng)
        if np.any(np.abs(action) > 0.95):
            continue
        assert abs(math.exp(log_prob) - fd_squashed_density(action, mean, np.exp(log_std))) < 1e-8


def test_squash_guard_changes_density_by_at_most_its_size():
    rng = np.random.default_rng(6)
    mean, log_std = np.zeros(4), np.zeros(4)
    for _ in range(50):
        a, lp, z = sample_action(mean, log_std, rng)
        exact = pol.gaussian_log_prob(z, mean, log_std) - np.sum(np.log(1 - np.tanh(z) ** 2))
        assert 0 <= exact - lp <= np.sum(1e-6 / (1 - a ** 2))


def test_sampled_actions_strictly_inside_unit_box():
    net = ActorCritic.for_env(5, seed=1)
    rng = np.random.default_rng(0)
    for _ in range(200):
        action, _, _, _ = net.act(rng.uniform(0, 1, 20), rng)
        assert np.all(np.abs(action) < 1)


# -- evaluate ----------------------------------------------------------------

def test_evaluate_consistent_with_sampling():
    net = ActorCritic.for_env(5, seed=2)
    rng = np.random.default_rng(3)
    obs = rng.uniform(0, 1, (8, 20))
    _, z, log_prob, value = net.act(obs, rng)
    lp, v, _ = net.evaluate(obs, z)
    np.testing.assert_allclose(lp, log_prob, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(v, value)


def test_entropy_closed_form():
    net = ActorCritic.for_env(5)
    _, _, ent = net.evaluate(np.zeros(20), np.zeros(20))
    assert ent == pytest.approx(20 * 0.5 * math.log(2 * math.pi * math.e), abs=1e-12)
    assert gaussian_entropy(np.zeros(3)) == pytest.approx(1.5 * math.log(2 * math.pi * math.e))


def test_log_std_clamped():
    net = ActorCritic.for_env(2)
    net.params["log_std"][:] = [-50, 10, 0, 1, 0, 0, 0, 0]
    _, ls = net.forward_actor(np.zeros(8))
    assert ls[0] == -20 and ls[1] == 2


# -- gradients ---------------------------------------------------------------

def ppo_batch(net, rng, batch=6):
    obs = rng.uniform(0, 1, (batch, net.obs_dim))
    mean, log_std = net.forward_actor(obs)
    z = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    new_lp, _, _ = net.evaluate(obs, z)
    ratios = []
    while len(ratios) < batch:
        r = rng.uniform(0.5, 1.6)
        if min(abs(r - 0.8), abs(r - 1.2)) > 0.02:
            ratios.append(r)
    old_lp = new_lp - np.log(ratios)
    adv = rng.standard_normal(batch)
    ret = rng.standard_normal(batch) * 3
    return obs, z, old_lp, adv, ret


def finite_difference_check(net, batch, clip=0.2, vf=0.5, ent=0.01, h=1e-5):
    _, grads, _ = net.loss_and_grads(*batch, clip, vf, ent)
    worst = 0.0
    for k, p in net.params.items():
        g = grads[k]
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            lp, _, _ = net.loss_and_grads(*batch, clip, vf, ent)
            p[idx] = old - h
            lm, _, _ = net.loss_and_grads(*batch, clip, vf, ent)
            p[idx] = old
            num = (lp - lm) / (2 * h)
            denom = max(abs(num), abs(g[idx]), 1e-6)
            worst = max(worst, abs(num - g[idx]) / denom)
    return worst


@pytest.mark.parametrize("seed", range(3))
def test_ppo_loss_gradient_matches_finite_differences(seed):
    net = small_net(seed, obs_dim=4, act_dim=4, hidden=(6, 5))
    batch = ppo_batch(net, np.random.default_rng(seed))
    assert finite_difference_check(net, batch) < 1e-4


def test_log_prob_gradient_matches_finite_differences():
    # policy term alone with a ratio of 1 everywhere is the mean of A * log-prob gradients
    net = small_net(11, hidden=(8, 8))
    rng = np.random.default_rng(11)
    obs, z, _, adv, ret = ppo_batch(net, rng)
    old_lp, _, _ = net.evaluate(obs, z)
    assert finite_difference_check(net, (obs, z, old_lp, adv, ret), clip=1e6, vf=0.0, ent=0.0) < 1e-4


def test_clipped_samples_contribute_no_policy_gradient():
    net = small_net(4, hidden=(5, 5))
    rng = np.random.default_rng(4)
    obs, z, _, _, ret = ppo_batch(net, rng, batch=4)
    new_lp, value, _ = net.evaluate(obs, z)
    # ratio 1.5 with A>0 and ratio 0.5 with A<0: clipped branch active in both
    old_lp = new_lp - np.log([1.5, 1.5, 0.5, 0.5])
    adv = np.array([1.0, 2.0, -1.0, -0.5])
    _, grads, info = net.loss_and_grads(obs, z, old_lp, adv, value, 0.2, vf_coef=0.0, ent_coef=0.0)
    for k in net.params:
        if not k.startswith("critic"):
            np.testing.assert_array_equal(grads[k], 0.0)
    assert info["clip_fraction"] == 1.0


# -- Adam ----------------------------------------------------------------------

def test_adam_zero_grad_is_fixed_point():
    params = {"w": np.array([1.0, -2.0])}
    opt = Adam(params)
    opt.step(params, {"w": np.zeros(2)}, 1e-3)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])
    assert opt.t == 1


def test_adam_zero_grad_decays_moments():
    params = {"w": np.array([1.0])}
    opt = Adam(params)
    opt.m["w"][:] = 0.5
    opt.v["w"][:] = 0.25
    opt.step(params, {"w": np.zeros(1)}, 1e-3)
    assert opt.m["w"][0] == 0.45
    assert opt.v["w"][0] == 0.25 * 0.999


def test_adam_first_step_hand_value():
    params = {"w": np.array([0.0])}
    opt = Adam(params)
    opt.step(params, {"w": np.array([1.0])}, 3e-4)
    # m_hat = v_hat = 1 at t = 1
    assert params["w"][0] == pytest.approx(-3e-4 / (1 + 1e-5), rel=1e-12)


def test_adam_deterministic():
    def run():
        params = {"w": np.array([0.3, 0.1])}
        opt = Adam(params)
        for g in ([1.0, -1.0], [0.5, 2.0], [-0.2, 0.0]):
            opt.step(params, {"w": np.array(g)}, 1e-2)
        return params["w"].copy()
    np.testing.assert_array_equal(run(), run())


def test_adam_rejects_non_finite():
    params = {"w": np.zeros(2)}
    with pytest.raises(TrainingDivergenceError):
        Adam(params).step(params, {"w": np.array([np.nan, 0.0])}, 1e-3)
    np.testing.assert_array_equal(params["w"], 0.0)


def test_clip_grad_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    norm = clip_grad_norm(grads, 0.5)
    assert norm == 5.0
    assert math.hypot(grads["a"][0], grads["b"][0]) == pytest.approx(0.5, rel=1e-5)


# -- serialization -------------------------------------------------------------

def test_checkpoint_round_trip_bit_identical(tmp_path):
    net = ActorCritic.for_env(5, seed=9)
    net.params["log_std"] += 0.123456789
    size = net.save(tmp_path / "c.json", {"num_rectan": 5})
    loaded, doc = ActorCritic.load(tmp_path / "c.json")
    assert size < 2 * 1024 * 1024
    assert doc["env_config"] == {"num_rectan": 5}
    for k in net.params:
        assert net.params[k].tobytes() == loaded.params[k].tobytes()
    obs = np.random.default_rng(0).uniform(0, 1, 20)
    assert net.forward_actor(obs)[0].tobytes() == loaded.forward_actor(obs)[0].tobytes()


def test_checkpoint_rejects_foreign_documents():
    with pytest.raises(ValueError):
        ActorCritic.from_document({"format": "other"})
