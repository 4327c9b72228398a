import csv

import numpy as np
import pytest

from windsteer import ConfigError
from windsteer.env import OBS_DIM, BoxPool, EnvConfig
from windsteer.isac import (
    AgentNets, Batch, ReplayBuffer, TrainConfig, TrainingError, actor_loss_and_grads,
    actor_update, bellman_target, critic_input, critic_update, load_agents, log_fields,
    save_agents, target_update, temperature_update, train,
)
from windsteer.nncore import max_relative_error, numerical_grad


def make_agent(seed=0, **kw):
    return AgentNets(TrainConfig(**kw), np.random.default_rng(seed))


def make_batch(n=16, seed=0):
    rng = np.random.default_rng(seed)
    return Batch(rng.standard_normal((n, OBS_DIM)), rng.uniform(-30, 30, n),
                 rng.standard_normal(n), rng.standard_normal((n, OBS_DIM)), np.zeros(n))


def constant_critic(net, value):
    for p in net.params:
        p[...] = 0.0
    net.params[-1][...] = value


def increasing_critic(net):
    # Q(o, a) = a / 30 + 1 through the first hidden unit of each layer
    for p in net.params:
        p[...] = 0.0
    W1, b1, W2, b2, W3, b3 = net.params
    W1[OBS_DIM, 0] = 1.0
    b1[0] = 1.0
    W2[0, 0] = 1.0
    W3[0, 0] = 1.0


# --- critic ---------------------------------------------------------------------------

def test_target_with_zero_discount_is_reward():
    ag, b = make_agent(), make_batch()
    np.testing.assert_array_equal(bellman_target(ag, b, 0.0, 0.2), b.reward)


def test_target_hand_calculation():
    ag = make_agent(1)
    b = make_batch(1, seed=2)
    eps = np.array([0.3])
    a_next, logp, _ = ag.policy(b.next_obs, eps)
    x = critic_input(b.next_obs, a_next)
    q = min(ag.q1_target.forward(x)[0, 0], ag.q2_target.forward(x)[0, 0])
    y = bellman_target(ag, b, 0.9, 0.0, eps)
    assert y[0] == pytest.approx(b.reward[0] + 0.9 * q, rel=1e-12)
    y_ent = bellman_target(ag, b, 0.9, 0.5, eps)
    assert y_ent[0] == pytest.approx(b.reward[0] + 0.9 * (q - 0.5 * logp[0]), rel=1e-12)


def test_truncation_never_terminal():
    ag = make_agent()
    buf = ReplayBuffer(8, 3)
    for k in range(4):
        buf.add(np.zeros((3, OBS_DIM)), np.zeros(3), 1.0, np.zeros((3, OBS_DIM)), k % 2 == 0)
    b = buf.agent_batch(np.arange(4), 0)
    np.testing.assert_array_equal(b.terminal, 0.0)
    assert bellman_target(ag, b, 0.99, 0.1)[0] != pytest.approx(1.0)


def test_critic_loss_zero_at_fixed_point():
    ag, b = make_agent(), make_batch()
    for net in (ag.q1, ag.q2, ag.q1_target, ag.q2_target):
        constant_critic(net, 2.5)
    b.reward[:] = 2.5
    l1, l2 = critic_update(ag, b, gamma=0.0, alpha=0.2)
    assert l1 == 0.0 and l2 == 0.0


def test_critic_update_reduces_loss():
    ag, b = make_agent(3), make_batch(64, seed=3)
    eps = np.zeros(64)
    first = critic_update(ag, b, 0.0, 0.2, eps)
    for _ in range(200):
        last = critic_update(ag, b, 0.0, 0.2, eps)
    assert sum(last) < 0.5 * sum(first)


# --- actor ----------------------------------------------------------------------------

def test_actor_gradient_matches_finite_differences():
    ag = make_agent(4, hidden=8)
    obs = make_batch(6, seed=4).obs
    eps = np.random.default_rng(5).standard_normal(6)
    _, grads, _ = actor_loss_and_grads(ag, obs, 0.3, eps)
    num = numerical_grad(lambda: actor_loss_and_grads(ag, obs, 0.3, eps)[0], ag.actor.params,
                         h=1e-6)
    assert max_relative_error(grads, num, floor=1e-8) < 1e-3


def test_actor_does_not_touch_critics():
    ag, b = make_agent(), make_batch()
    before = [p.copy() for p in ag.q1.params + ag.q2.params]
    actor_update(ag, b, 0.2)
    for p, q in zip(before, ag.q1.params + ag.q2.params):
        np.testing.assert_array_equal(p, q)


def test_flat_critic_raises_entropy():
    ag, b = make_agent(6), make_batch(64, seed=6)
    constant_critic(ag.q1, 0.0)
    constant_critic(ag.q2, 0.0)

    def mean_log_std():
        out = ag.actor.forward(b.obs)
        return float(np.mean(ag.head.log_std(out[:, 1])))
    start = mean_log_std()
    for _ in range(100):
        actor_update(ag, b, 0.2)
    assert mean_log_std() > start + 0.1


def test_increasing_critic_pushes_mean_up():
    ag, b = make_agent(7), make_batch(64, seed=7)
    increasing_critic(ag.q1)
    increasing_critic(ag.q2)
    start = float(np.mean(ag.act(b.obs, deterministic=True)))
    for _ in range(100):
        actor_update(ag, b, 0.0)
    assert float(np.mean(ag.act(b.obs, deterministic=True))) > start + 5.0


# --- temperature ----------------------------------------------------------------------

def test_temperature_fixed_point():
    ag, b = make_agent(8), make_batch(32, seed=8)
    eps = np.random.default_rng(0).standard_normal(32)
    _, logp, _ = ag.policy(b.obs, eps)
    alpha = ag.alpha
    temperature_update(ag, b, target_entropy=-float(np.mean(logp)), eps=eps)
    assert ag.alpha == pytest.approx(alpha, rel=1e-12)


def test_temperature_rises_when_entropy_low():
    ag, b = make_agent(9), make_batch(32, seed=9)
    alpha = ag.alpha
    for _ in range(10):
        temperature_update(ag, b, target_entropy=100.0)
    assert ag.alpha > alpha


def test_temperature_fixed_mode():
    ag, b = make_agent(alpha_init=0.2), make_batch()
    for _ in range(10):
        temperature_update(ag, b, target_entropy=100.0, autotune=False)
    assert ag.alpha == pytest.approx(0.2)


# --- targets --------------------------------------------------------------------------

def test_target_update_extremes():
    ag = make_agent()
    for p in ag.q1.params:
        p += 1.0
    frozen = [p.copy() for p in ag.q1_target.params]
    target_update(ag, 0.0)
    for p, q in zip(frozen, ag.q1_target.params):
        np.testing.assert_array_equal(p, q)
    target_update(ag, 1.0)
    for p, q in zip(ag.q1.params, ag.q1_target.params):
        np.testing.assert_array_equal(p, q)


def test_target_update_scalar():
    ag = make_agent()
    for net, val in ((ag.q1, 1.0), (ag.q1_target, 0.0)):
        for p in net.params:
            p[...] = val
    target_update(ag, 0.005)
    for p in ag.q1_target.params:
        np.testing.assert_allclose(p, 0.005)


def test_target_lag_shrinks():
    ag = make_agent()
    for p in ag.q2.params:
        p += 0.5
    gaps = []
    for _ in range(5):
        target_update(ag, 0.1)
        gaps.append(sum(np.linalg.norm(p - q) for p, q in zip(ag.q2.params, ag.q2_target.params)))
    assert all(b < a for a, b in zip(gaps, gaps[1:]))


def test_targets_start_equal():
    ag = make_agent()
    for p, q in zip(ag.q1.params, ag.q1_target.params):
        np.testing.assert_array_equal(p, q)


# --- replay ---------------------------------------------------------------------------

def test_replay_ring_and_slices():
    buf = ReplayBuffer(4, 3, seed=0)
    with pytest.raises(ValueError):
        buf.sample_indices(1)
    for k in range(6):
        obs = np.full((3, OBS_DIM), float(k)) + np.arange(3)[:, None] * 100
        buf.add(obs, np.array([k, k + 10, k + 20]), float(k), obs + 0.5, False)
    assert len(buf) == 4
    assert sorted(buf.rewards) == [2.0, 3.0, 4.0, 5.0]
    b = buf.agent_batch(np.array([0]), 2)
    assert b.obs[0, 0] == 204.0 and b.action[0] == 24.0 and b.next_obs[0, 0] == 204.5


def test_replay_agent_batch_ignores_other_agents():
    buf = ReplayBuffer(5, 3)
    rng = np.random.default_rng(0)
    for _ in range(5):
        buf.add(rng.standard_normal((3, OBS_DIM)), rng.standard_normal(3), 1.0,
                rng.standard_normal((3, OBS_DIM)), False)
    idx = np.arange(5)
    ref = buf.agent_batch(idx, 1)
    buf.obs[:, [0, 2]] = 99.0
    buf.actions[:, [0, 2]] = 99.0
    buf.next_obs[:, [0, 2]] = 99.0
    again = buf.agent_batch(idx, 1)
    for f in ("obs", "action", "reward", "next_obs"):
        np.testing.assert_array_equal(getattr(ref, f), getattr(again, f))


def test_replay_sampling_uniform():
    buf = ReplayBuffer(10, 1, seed=11)
    for k in range(10):
        buf.add(np.zeros((1, OBS_DIM)), np.zeros(1), k, np.zeros((1, OBS_DIM)), False)
    counts = np.bincount(buf.sample_indices(1_000_000), minlength=10)
    np.testing.assert_allclose(counts / 1e6, 0.1, rtol=0.02)


def test_replay_samples_filled_region_only():
    buf = ReplayBuffer(100, 1)
    for _ in range(7):
        buf.add(np.zeros((1, OBS_DIM)), np.zeros(1), 0.0, np.zeros((1, OBS_DIM)), False)
    assert buf.sample_indices(10_000).max() == 6


# --- config, checkpoints, training loop -----------------------------------------------

def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(gamma=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(warmup=10, batch_size=256)
    with pytest.raises(ConfigError):
        TrainConfig(tau=0.0)


def test_checkpoint_round_trip(tmp_path):
    agents = [make_agent(s) for s in range(3)]
    agents[1].log_alpha[0] = np.log(0.07)
    save_agents(agents, tmp_path, {"box_pool_ids": [1, 2]})
    back = load_agents(tmp_path)
    probe = make_batch(10, seed=1)
    x = critic_input(probe.obs, probe.action)
    for a, b in zip(agents, back):
        np.testing.assert_array_equal(a.actor.forward(probe.obs), b.actor.forward(probe.obs))
        np.testing.assert_array_equal(a.q2_target.forward(x), b.q2_target.forward(x))
        assert a.alpha == pytest.approx(b.alpha)
    assert (tmp_path / "agent0_actor.mnet").read_bytes()[:4] == b"MNET"


def test_load_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError, match="manifest"):
        load_agents(tmp_path)


def small_env(**kw):
    return EnvConfig(n_env=3, spinup=100.0, **kw)


def small_train(**kw):
    base = dict(total_steps=300, batch_size=32, warmup=60, hidden=16, seed=5)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_steps_writes_untrained_checkpoint(tmp_path, surrogate):
    agents, rows = train(small_train(total_steps=0), small_env(), surrogate, BoxPool(range(4)),
                         out_dir=tmp_path)
    assert rows == []
    lines = (tmp_path / "train_log.csv").read_text().splitlines()
    assert lines == [",".join(log_fields(3))]
    assert len(load_agents(tmp_path / "checkpoints" / "final")) == 3


def test_training_is_deterministic(tmp_path, surrogate):
    logs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        train(small_train(checkpoint_every=150), small_env(), surrogate, BoxPool(range(4)),
              out_dir=out, threads=0)
        logs.append((out / "train_log.csv").read_text())
    assert logs[0] == logs[1]
    rows = list(csv.DictReader(logs[0].splitlines()))
    assert int(rows[-1]["cumulative_step"]) == 300
    assert set(rows[0]) >= {"R_total", "R_power", "R_penalty", "alpha_0", "critic_loss_2"}
    for r in rows:
        total = float(r["R_power"]) + float(r["R_penalty"])
        assert float(r["R_total"]) == pytest.approx(max(total, -10.0), abs=1e-12)
    assert (tmp_path / "run0" / "checkpoints" / "step_150" / "manifest.json").exists()


def test_non_finite_loss_aborts_with_dump(tmp_path, surrogate, monkeypatch):
    import windsteer.env as env_mod
    real = env_mod.shaped_reward

    def poisoned(*a, **kw):
        rw = real(*a, **kw)
        return env_mod.RewardComponents(rw.r_power, rw.r_constraint, float("nan"), rw.delta,
                                        rw.delta_max, rw.alpha)
    monkeypatch.setattr(env_mod, "shaped_reward", poisoned)
    with pytest.raises(TrainingError, match="non-finite"):
        train(small_train(), small_env(), surrogate, BoxPool(range(4)), out_dir=tmp_path)
    assert list(tmp_path.glob("bad_batch_agent*_step*.npz"))
