import numpy as np
import pytest
from scipy import stats

from cderail.agents import AgentConfig, DqnAgent
from cderail.dqn import (
    Batch,
    DqnConfig,
    ReplayBuffer,
    Transition,
    buffer_push,
    buffer_sample,
    epsilon,
    reset_buffer,
    select_action,
    select_actions,
    td_targets,
    td_update,
)
from cderail.errors import ShapeMismatchError, UnderfullError
from cderail.neuralnet import OptState, QNetwork, forward, mlp_init


def test_epsilon_start():
    assert epsilon(0) == 1.0


def test_epsilon_half_life():
    # ln 2 / ln 1.000005 is just under 138,629.8
    assert abs(epsilon(138_629) - 0.5) < 1e-3


def test_epsilon_monotone():
    steps = np.arange(0, 2_000_000, 997)
    vals = np.array([epsilon(int(s)) for s in steps])
    assert np.all(np.diff(vals) < 0) and vals[-1] > 0


def test_epsilon_negative_step():
    with pytest.raises(ValueError):
        epsilon(-1)


def _fixed_q_net(q):
    """Single linear layer whose output is ``q`` for any input of zeros."""
    q = np.asarray(q, dtype=float)
    return QNetwork([np.zeros((3, len(q)))], [q], [])


def test_greedy_picks_argmax():
    net = _fixed_q_net([0.1, 0.5, 0.2, -1.0, 0.0])
    assert select_action(net, np.zeros(3), 0.0, np.random.default_rng(0)) == 1


def test_greedy_tie_goes_to_lowest_index():
    net = _fixed_q_net([0.0, 0.7, 0.7, 0.7, 0.1])
    assert select_action(net, np.zeros(3), 0.0, np.random.default_rng(0)) == 1


def test_full_exploration_is_uniform():
    net = _fixed_q_net([0.0, 1.0, 0.0, 0.0, 0.0])
    acts = select_actions(net, np.zeros((100_000, 3)), 1.0, np.random.default_rng(0))
    counts = np.bincount(acts, minlength=5)
    assert stats.chisquare(counts).pvalue > 1e-3


def _t(i, d=2):
    return Transition(np.full(d, i, dtype=float), i % 5, float(i), np.full(d, i + 1, dtype=float), False)


def test_ring_eviction():
    buf = ReplayBuffer(capacity=4)
    for i in range(5):
        buffer_push(buf, _t(i))
    assert len(buf) == 4
    held = set(buf.take(np.arange(4)).r.tolist())
    assert held == {1.0, 2.0, 3.0, 4.0}


def test_sample_underfull():
    buf = ReplayBuffer(capacity=10)
    buffer_push(buf, _t(0))
    with pytest.raises(UnderfullError):
        buffer_sample(buf, 2, np.random.default_rng(0))


def test_sample_is_uniform():
    buf = ReplayBuffer(capacity=20)
    for i in range(20):
        buffer_push(buf, _t(i))
    rng = np.random.default_rng(1)
    r = np.concatenate([buffer_sample(buf, 10, rng).r for _ in range(10_000)])
    counts = np.bincount(r.astype(int), minlength=20)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_reset_is_idempotent():
    buf = ReplayBuffer(capacity=8)
    for i in range(5):
        buffer_push(buf, _t(i))
    reset_buffer(buf)
    reset_buffer(buf)
    assert len(buf) == 0
    buffer_push(buf, _t(9))
    assert buf.take([0]).r[0] == 9.0


def test_buffer_grows_past_initial_allocation():
    buf = ReplayBuffer(capacity=5000, obs_dim=2)
    for i in range(3000):
        buffer_push(buf, _t(i))
    assert len(buf) == 3000
    assert buf.take([0, 2999]).r.tolist() == [0.0, 2999.0]


def _batch(s, a, r, s2, done):
    return Batch(np.asarray(s, float), np.asarray(a), np.asarray(r, float), np.asarray(s2, float),
                 np.asarray(done, bool))


def test_terminal_target_is_reward():
    net = _fixed_q_net([3.0, 9.0, 0, 0, 0])
    b = _batch(np.zeros((2, 3)), [0, 0], [1.5, 1.5], np.zeros((2, 3)), [True, False])
    y = td_targets(net, None, b, 0.9)
    assert y[0] == 1.5
    assert y[1] == pytest.approx(1.5 + 0.9 * 9.0)


def test_toy_loss_by_hand():
    # q(s) = w.s with one input and two actions
    net = QNetwork([np.array([[1.0, 2.0]])], [np.zeros(2)], [])
    b = _batch([[1.0], [2.0]], [0, 1], [0.5, -1.0], [[1.0], [0.0]], [False, True])
    cfg = DqnConfig(gamma=0.5, batch_size=2, use_target=False)
    # row 0: q = 1, y = 0.5 + 0.5 * max(1, 2) = 1.5 -> delta -0.5
    # row 1: q = 4, y = -1 -> delta 5
    loss = td_update(net, None, OptState.for_network(net), b, cfg)
    assert loss == pytest.approx((0.25 + 25.0) / 2)


def test_td_update_reduces_loss_on_fixed_batch():
    rng = np.random.default_rng(0)
    net = mlp_init(4, (16,), 3, seed=0)
    b = _batch(rng.normal(size=(8, 4)), rng.integers(0, 3, 8), rng.normal(size=8), rng.normal(size=(8, 4)),
               np.ones(8, bool))
    cfg = DqnConfig(batch_size=8, lr=1e-2, use_target=False)
    opt = OptState.for_network(net, lr=cfg.lr)
    first = td_update(net, None, opt, b, cfg)
    for _ in range(200):
        last = td_update(net, None, opt, b, cfg)
    assert last < 0.05 * first


def test_target_network_moves_by_tau():
    net, target = mlp_init(2, (3,), 2, seed=0), mlp_init(2, (3,), 2, seed=1)
    b = _batch(np.zeros((2, 2)), [0, 1], [0, 0], np.zeros((2, 2)), [True, True])
    cfg = DqnConfig(batch_size=2, target_tau=0.25)
    before = target.get_flat()
    td_update(net, target, OptState.for_network(net), b, cfg)
    assert np.allclose(target.get_flat(), 0.75 * before + 0.25 * net.get_flat())


def test_batch_size_mismatch():
    net = mlp_init(2, (3,), 2)
    b = _batch(np.zeros((3, 2)), [0, 0, 0], [0, 0, 0], np.zeros((3, 2)), [True] * 3)
    with pytest.raises(ShapeMismatchError):
        td_update(net, None, OptState.for_network(net), b, DqnConfig(batch_size=2))


def test_one_update_every_eight_ticks():
    cfg = DqnConfig(batch_size=4, update_every=8)
    agent = DqnAgent(3, AgentConfig(algo="dqn", hidden=(4,)), cfg, seed=0)
    rng = np.random.default_rng(0)
    for _ in range(80):
        s = rng.normal(size=(1, 3))
        agent.observe_tick(s, agent.act(s), np.zeros(1), s, np.zeros(1, bool))
    # learning starts once four transitions are stored; ticks 8, 16, ... 80 all qualify
    assert agent.env_steps == 80
    assert agent.updates == 10


def test_agent_epsilon_uses_time_scale():
    agent = DqnAgent(3, AgentConfig(algo="dqn", hidden=(4,), epsilon_time_scale=20.0), DqnConfig(), seed=0)
    agent.env_steps = 6932
    assert agent.epsilon == pytest.approx(epsilon(138_640), rel=1e-9)


def test_greedy_agent_actions_are_deterministic():
    agent = DqnAgent(3, AgentConfig(algo="dqn", hidden=(4,)), DqnConfig(), seed=0)
    obs = np.random.default_rng(0).normal(size=(6, 3))
    q, _ = forward(agent.eval_net(), obs.astype(np.float32))
    assert np.array_equal(agent.greedy(obs), np.argmax(q, axis=1))
