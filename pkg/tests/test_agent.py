import numpy as np
import pytest
from pydantic import ValidationError

from legaledge.agent import (
    AgentConfig,
    Batch,
    BufferTooSmall,
    DQNAgent,
    PrioritizedReplayBuffer,
    ReplayBuffer,
    bellman_target,
    episodes_to_floor,
    run_local_episodes,
    select_action,
)
from legaledge.contract import ContractDesk, RewardModel
from legaledge.env import ChargingEnv, EnvConfig
from legaledge.ledger import Ledger, verify_chain
from legaledge.nn import ModelParams, forward, init_params


def const_net(values) -> ModelParams:
    """A 1-input linear 'network' whose output is ``values`` regardless of input."""
    v = np.asarray(values, dtype=np.float64)
    return ModelParams([(np.zeros((v.size, 1)), v.copy())])


def test_greedy_argmax_and_tie():
    rng = np.random.default_rng(0)
    assert select_action(const_net([0.1, 0.9, 0.3]), np.zeros(1), 0.0, rng) == 1
    assert select_action(const_net([0.5, 0.2, 0.5]), np.zeros(1), 0.0, rng) == 0
    with pytest.raises(ValueError):
        select_action(const_net([0.0]), np.zeros(1), 1.5, rng)


def test_uniform_exploration():
    rng = np.random.default_rng(1)
    net = const_net(np.arange(11.0))
    counts = np.bincount([select_action(net, np.zeros(1), 1.0, rng) for _ in range(11_000)], minlength=11)
    assert counts.min() >= 700 and counts.max() <= 1120


def _batch(r, done, s=None, a=0):
    s = np.zeros((1, 1)) if s is None else s
    return Batch(s, np.array([a]), np.array([r]), s, np.array([done]))


def test_bellman_examples():
    net = const_net([2.0, 1.0])
    assert bellman_target(_batch(1.0, False), net, net, 0.99, double=False)[0] == pytest.approx(2.98)
    assert bellman_target(_batch(-2.0, True), net, net, 0.99)[0] == -2.0


def test_double_dqn_uses_online_argmax():
    online = const_net([1.0, 5.0])
    target = const_net([3.0, 0.5])
    b = _batch(0.0, False)
    assert bellman_target(b, online, target, 0.5, double=True)[0] == pytest.approx(0.25)
    assert bellman_target(b, online, target, 0.5, double=False)[0] == pytest.approx(1.5)


def test_zero_td_leaves_params_unchanged():
    cfg = AgentConfig(batch_size=1, buffer_capacity=4, per=False, hidden=(4,))
    agent = DQNAgent(cfg, seed=0, state_dim=2, n_actions=3)
    s = np.array([0.3, -0.1])
    q = forward(agent.online, s)
    # terminal transition whose reward equals the current estimate: TD error 0
    agent.remember(s, 1, q[1], s, True)
    before = agent.online.flat()
    stats = agent.train_step()
    assert stats.mean_abs_td == pytest.approx(0.0, abs=1e-12)
    assert np.array_equal(agent.online.flat(), before)


def test_overfits_single_batch():
    cfg = AgentConfig(batch_size=8, buffer_capacity=8, per=False, lr=1e-2, gamma=0.0)
    agent = DQNAgent(cfg, seed=0, state_dim=5, n_actions=11)
    rng = np.random.default_rng(0)
    s = rng.normal(size=(8, 5))
    batch = Batch(s, rng.integers(11, size=8), rng.normal(size=8), s, np.ones(8, dtype=bool))
    tds = [agent.train_on(batch)[0].mean_abs_td for _ in range(200)]
    assert tds[-1] < 0.1 * tds[0]
    assert np.mean(tds[-20:]) < np.mean(tds[:20])


def test_buffer_ring_eviction_and_too_small():
    buf = ReplayBuffer(3, state_dim=1)
    for i in range(5):
        buf.push(np.array([i]), 0, float(i), np.array([i]), False)
    assert len(buf) == 3
    assert sorted(buf.rewards.tolist()) == [2.0, 3.0, 4.0]
    with pytest.raises(BufferTooSmall):
        buf.sample(4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        buf.push(np.array([np.nan]), 0, 0.0, np.array([0.0]), False)


def test_per_uniform_when_priorities_equal():
    buf = PrioritizedReplayBuffer(10, state_dim=1)
    for i in range(10):
        buf.push(np.array([i]), 0, 0.0, np.array([i]), False)
    assert np.allclose(buf.probabilities(), 0.1)
    _, _, w = buf.sample(5, np.random.default_rng(0))
    assert np.allclose(w, 1.0)


def test_per_prefers_high_td():
    buf = PrioritizedReplayBuffer(4, state_dim=1, alpha=1.0)
    for i in range(4):
        buf.push(np.array([i]), 0, 0.0, np.array([i]), False)
    buf.update_priorities(np.arange(4), np.array([1.0, 1.0, 1.0, 7.0]))
    p = buf.probabilities()
    assert p[3] == pytest.approx(0.7, rel=1e-5)
    rng = np.random.default_rng(0)
    draws = [buf.sample(4, rng) for _ in range(500)]
    idx = np.concatenate([d[0] for d in draws])
    assert abs(np.mean(idx == 3) - 0.7) < 0.04
    for i, _, w in draws:
        assert w.max() == 1.0
        if (i == 3).any() and (i != 3).any():
            assert w[i == 3].max() < w[i != 3].min()
    # a new transition enters at the current max priority
    buf.push(np.array([9]), 0, 0.0, np.array([9]), False)
    assert buf.priorities[0] == buf.priorities.max()


def test_target_net_syncs_on_schedule():
    cfg = AgentConfig(batch_size=2, buffer_capacity=10, target_sync=3, per=False, hidden=(4,))
    agent = DQNAgent(cfg, seed=0, state_dim=2, n_actions=2)
    rng = np.random.default_rng(0)
    for _ in range(4):
        s = rng.normal(size=2)
        agent.remember(s, 0, 1.0, s, True)
    t0 = agent.target.flat()
    agent.train_step()
    agent.train_step()
    assert np.array_equal(agent.target.flat(), t0)
    assert not np.array_equal(agent.online.flat(), t0)
    agent.train_step()
    assert np.array_equal(agent.target.flat(), agent.online.flat())


def test_load_sets_both_nets():
    agent = DQNAgent(seed=0)
    g = init_params(rng=9)
    agent.load(g)
    assert np.array_equal(agent.online.flat(), g.flat())
    assert np.array_equal(agent.target.flat(), g.flat())
    assert agent.online is not g


def test_epsilon_schedule():
    cfg = AgentConfig()
    assert episodes_to_floor(cfg) == 598
    agent = DQNAgent(cfg)
    for _ in range(597):
        agent.end_episode()
    assert agent.epsilon > 0.05
    agent.end_episode()
    assert agent.epsilon == 0.05
    agent.end_episode()
    assert agent.epsilon == 0.05


def test_config_validation():
    with pytest.raises(ValidationError):
        AgentConfig(batch_size=100, buffer_capacity=10)
    with pytest.raises(ValidationError):
        AgentConfig(gamma=1.0)


def _episodes(seed, n):
    led = Ledger()
    env = ChargingEnv(EnvConfig(), seed=seed)
    agent = DQNAgent(AgentConfig(batch_size=16), seed=seed)
    desk = ContractDesk(0, led, RewardModel(env.cfg))
    rep = run_local_episodes(agent, env, desk, n)
    return rep, agent, led


def test_local_episodes_record_24_transitions_each():
    rep, agent, led = _episodes(0, 2)
    assert rep.transitions == 48 and len(agent.buffer) == 48
    assert len(rep.rewards) == 2 and all(r <= 0 for r in rep.rewards)
    assert rep.contract_errors == 0
    assert len(rep.td_errors) == 48 - 16 + 1
    assert verify_chain(led).ok
    ops = [tx.op_name for tx in led.transactions()]
    assert ops.count("settle") == 2 and ops.count("reward_query") == 48


def test_local_episodes_deterministic():
    a = _episodes(3, 2)
    b = _episodes(3, 2)
    assert a[0].rewards == b[0].rewards
    assert np.array_equal(a[1].online.flat(), b[1].online.flat())
    assert a[2].head_hash == b[2].head_hash
