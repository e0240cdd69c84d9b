from dataclasses import replace

import numpy as np
import pytest

from safemr import safety_index as si
from safemr.agent import (AgentConfig, AgentNets, ReplayBuffer, Transition, act,
                          constraint_targets, critic_update, policy_and_multiplier_grads)

OBS, ACT = 4, 2
PARAMS = si.SafetyIndexParams(0.3, 1.0, 2.0, 0.1, 0.05)
SMALL = AgentConfig(hidden=(16,), multiplier_hidden=(8,), batch_size=32)


def _nets(cfg=SMALL, seed=0):
    return AgentNets.build(OBS, ACT, cfg, np.random.default_rng(seed))


def _batch(rng, B=32, reward=None, d=None, d_next=None):
    d = rng.uniform(0.2, 2.0, B) if d is None else np.full(B, d)
    d_next = d + rng.normal(0, 0.02, B) if d_next is None else np.full(B, d_next)
    return {
        "obs": rng.standard_normal((B, OBS)),
        "next_obs": rng.standard_normal((B, OBS)),
        "action": rng.uniform(-1, 1, (B, ACT)),
        "reward": rng.standard_normal(B) if reward is None else np.full(B, reward),
        "d": d, "d_dot": rng.uniform(-1, 1, B),
        "d_next": d_next, "d_dot_next": rng.uniform(-1, 1, B),
        "violation": np.zeros(B, bool), "done": np.zeros(B, bool),
    }


def _fixed_constraint_batch(rng, B, d, d_dot, d_next, d_dot_next):
    b = _batch(rng, B)
    b.update(d=np.full(B, d), d_dot=np.full(B, d_dot),
             d_next=np.full(B, d_next), d_dot_next=np.full(B, d_dot_next))
    return b


def test_myopic_reward_critic_regresses_the_reward():
    # linear critics make the regression convex, so the fit is exact
    cfg = replace(SMALL, hidden=(), gamma=0.0, alpha=0.0, lr_critic=3e-3)
    nets = _nets(cfg)
    rng = np.random.default_rng(1)
    batch = _batch(rng, reward=0.7)
    for _ in range(2000):
        critic_update(nets, batch, PARAMS, rng)
    sa = np.concatenate([batch["obs"], batch["action"]], axis=1)
    np.testing.assert_allclose(nets.q1.forward(sa)[:, 0], 0.7, atol=1e-3)
    np.testing.assert_allclose(nets.q2.forward(sa)[:, 0], 0.7, atol=1e-3)


def test_constraint_critic_regresses_a_constant_residual():
    nets = _nets(replace(SMALL, lr_critic=3e-3))
    rng = np.random.default_rng(2)
    batch = _fixed_constraint_batch(rng, 32, 0.5, -0.2, 0.49, -0.2)
    c = float(constraint_targets(batch, PARAMS)[0])
    np.testing.assert_allclose(constraint_targets(batch, PARAMS), c)
    for _ in range(2000):
        critic_update(nets, batch, PARAMS, rng)
    sa = np.concatenate([batch["obs"], batch["action"]], axis=1)
    np.testing.assert_allclose(nets.qc.forward(sa)[:, 0], c, atol=1e-2)


def test_constraint_target_floor():
    nets = _nets(replace(SMALL, lr_critic=3e-3, qc_target_floor=-0.1))
    rng = np.random.default_rng(3)
    batch = _fixed_constraint_batch(rng, 32, 2.0, 1.0, 2.02, 1.0)
    assert constraint_targets(batch, PARAMS)[0] < -1.0
    for _ in range(2000):
        critic_update(nets, batch, PARAMS, rng)
    sa = np.concatenate([batch["obs"], batch["action"]], axis=1)
    np.testing.assert_allclose(nets.qc.forward(sa)[:, 0], -0.1, atol=1e-2)


def test_constraint_targets_are_the_residual():
    rng = np.random.default_rng(4)
    b = _batch(rng)
    expect = [si.residual(PARAMS, b["d"][i], b["d_dot"][i], b["d_next"][i], b["d_dot_next"][i])
              for i in range(32)]
    np.testing.assert_allclose(constraint_targets(b, PARAMS), expect, rtol=1e-14)


@pytest.mark.parametrize("tau", [0.0, 1.0])
def test_target_network_averaging(tau):
    nets = _nets(replace(SMALL, tau=tau))
    before = nets.q1_target.weights.copy()
    critic_update(nets, _batch(np.random.default_rng(5)), PARAMS, np.random.default_rng(0))
    if tau == 1.0:
        np.testing.assert_array_equal(nets.q1_target.weights, nets.q1.weights)
        np.testing.assert_array_equal(nets.qc_target.weights, nets.qc.weights)
    else:
        np.testing.assert_array_equal(nets.q1_target.weights, before)
        assert not np.array_equal(nets.q1.weights, before)


def test_empty_batch_rejected():
    nets = _nets()
    b = _batch(np.random.default_rng(0), B=0)
    with pytest.raises(ValueError):
        critic_update(nets, b, PARAMS, np.random.default_rng(0))


def test_zero_constraint_critic_gives_zero_multiplier_gradient():
    nets = _nets()
    nets.qc.weights[:] = 0.0
    b = _batch(np.random.default_rng(6))
    g_theta, g_xi, _ = policy_and_multiplier_grads(nets, b, np.random.default_rng(0))
    assert not g_xi.any()
    # with Q_c == 0 the multiplier cannot influence the policy gradient
    nets.multiplier.weights[-1] += 3.0
    g_theta2, _, _ = policy_and_multiplier_grads(nets, b, np.random.default_rng(0))
    np.testing.assert_array_equal(g_theta, g_theta2)


def test_vanishing_multiplier_drops_the_constraint_term():
    nets = _nets()
    b = _batch(np.random.default_rng(7))
    nets.multiplier.weights[:] = 0.0
    nets.multiplier.weights[-1] = -40.0  # softplus(-40) ~ 4e-18
    g1, _, _ = policy_and_multiplier_grads(nets, b, np.random.default_rng(0))
    nets.qc.weights[:] = np.random.default_rng(1).standard_normal(nets.qc.n_params)
    g2, _, _ = policy_and_multiplier_grads(nets, b, np.random.default_rng(0))
    np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-16)


def _policy_loss(nets, batch, seed):
    _, _, info = policy_and_multiplier_grads(nets, batch, np.random.default_rng(seed),
                                             need_multiplier=False)
    return info["policy_loss"]


def test_policy_gradient_matches_differences():
    nets = _nets()
    b = _batch(np.random.default_rng(8), B=16)
    g, _, _ = policy_and_multiplier_grads(nets, b, np.random.default_rng(11))
    w = nets.policy.weights
    h = 1e-6
    for i in np.random.default_rng(9).choice(w.size, 25, replace=False):
        old = w[i]
        w[i] = old + h
        up = _policy_loss(nets, b, 11)
        w[i] = old - h
        down = _policy_loss(nets, b, 11)
        w[i] = old
        num = (up - down) / (2 * h)
        assert abs(num - g[i]) <= 1e-4 * max(1.0, abs(num)) + 1e-8


def test_multiplier_gradient_matches_differences():
    nets = _nets()
    b = _batch(np.random.default_rng(10), B=16)
    _, g, _ = policy_and_multiplier_grads(nets, b, np.random.default_rng(12))

    def objective():
        rng = np.random.default_rng(12)
        a, _, _ = nets.head.sample(nets.policy.forward(b["obs"]),
                                   rng.standard_normal((16, ACT)))
        qc = nets.qc.forward(np.concatenate([b["obs"], a], axis=1))[:, 0]
        return float(np.mean(nets.lam(b["obs"]) * qc))

    w = nets.multiplier.weights
    h = 1e-6
    for i in range(w.size):
        old = w[i]
        w[i] = old + h
        up = objective()
        w[i] = old - h
        down = objective()
        w[i] = old
        num = (up - down) / (2 * h)
        assert abs(num - g[i]) <= 1e-4 * max(1.0, abs(num)) + 1e-9


def _constant_qc(nets, value):
    nets.qc.weights[:] = 0.0
    nets.qc.weights[-1] = value


@pytest.mark.parametrize("sign", [1.0, -1.0])
def test_multiplier_follows_the_sign_of_the_constraint_value(sign):
    from safemr.approximator import apply_step
    nets = _nets(replace(SMALL, lr_multiplier=1e-2, multiplier_init=1.0))
    _constant_qc(nets, 0.5 * sign)
    b = _batch(np.random.default_rng(13), B=1)
    lams = [float(nets.lam(b["obs"])[0])]
    for _ in range(300):
        _, g, _ = policy_and_multiplier_grads(nets, b, np.random.default_rng(0),
                                              need_policy=False)
        apply_step(nets.multiplier.weights, g, nets.opt["multiplier"], "ascent")
        lams.append(float(nets.lam(b["obs"])[0]))
    diffs = np.diff(lams)
    if sign > 0:
        assert np.all(diffs > 0)
    else:
        assert np.all(diffs < 0) and min(lams) >= 0


def test_actions_inside_bounds_and_deterministic_repeatable():
    nets = AgentNets.build(OBS, 1, SMALL, np.random.default_rng(0), -2.0, 0.5)
    nets.policy.weights *= 20
    obs = np.random.default_rng(1).standard_normal((5000, OBS)) * 5
    for mode in ("stochastic", "deterministic"):
        a = act(nets, obs, mode, np.random.default_rng(2))
        assert a.shape == (5000, 1)
        assert np.all(a >= -2.0) and np.all(a <= 0.5)
    np.testing.assert_array_equal(act(nets, obs[:3]), act(nets, obs[:3]))
    assert act(nets, obs[0]).shape == (1,)
    with pytest.raises(ValueError):
        act(nets, obs, "stochastic")
    with pytest.raises(ValueError):
        act(nets, obs, "greedy")


def test_multiplier_starts_near_its_initial_value():
    for init in (0.0, 1.0, 5.0):
        nets = _nets(replace(SMALL, multiplier_init=init))
        nets.multiplier.weights[:-1] = 0.0
        lam = nets.lam(np.zeros((1, OBS)))[0]
        assert lam == pytest.approx(max(init, 1e-6), rel=1e-9)


def _transition(i):
    f = si.DistanceFeature(1.0 + i, 0.0)
    return Transition(np.full(OBS, i), np.full(ACT, 0.1), float(i), np.full(OBS, i + 1),
                      f, f, False, False)


def test_replay_buffer_is_fifo():
    buf = ReplayBuffer(3, OBS, ACT, seed=0)
    with pytest.raises(ValueError):
        buf.sample(2)
    for i in range(5):
        buf.add(_transition(i))
    assert len(buf) == 3 and buf.inserted == 5
    assert sorted(buf.reward.tolist()) == [2.0, 3.0, 4.0]
    b = buf.sample(100)
    assert set(b["reward"].tolist()) <= {2.0, 3.0, 4.0}
    np.testing.assert_array_equal(b["d"], b["reward"] + 1.0)
    with pytest.raises(ValueError):
        ReplayBuffer(0, OBS, ACT)


def test_checkpoint_roundtrip(tmp_path):
    nets = _nets(replace(SMALL, qc_target_floor=-0.1))
    rng = np.random.default_rng(14)
    b = _batch(rng)
    for _ in range(3):
        critic_update(nets, b, PARAMS, rng)
    nets.save(tmp_path / "ck")
    back = AgentNets.load(tmp_path / "ck")
    assert back.cfg == nets.cfg
    obs = rng.standard_normal((7, OBS))
    np.testing.assert_array_equal(act(nets, obs), act(back, obs))
    np.testing.assert_array_equal(nets.lam(obs), back.lam(obs))
    critic_update(nets, b, PARAMS, np.random.default_rng(0))
    critic_update(back, b, PARAMS, np.random.default_rng(0))
    for name in ("q1", "q2", "qc", "q1_target", "qc_target"):
        np.testing.assert_array_equal(getattr(nets, name).weights, getattr(back, name).weights)
