import numpy as np
import pytest

from pursuit import dqn_agent as dqn, nn_core as nn
from pursuit.dqn_agent import AgentParams, Batch, DqnSpec, Experience, ReplayBuffer
from pursuit.iese import IeseSpec
from pursuit.selfcheck import randomize_biases
from pursuit.state_codec import AgentState

import oracles

SPEC = DqnSpec(IeseSpec(8, 10))
TOY = DqnSpec(IeseSpec(4, 3, channels=(4, 4), d_att=6, d_out=10), hidden=8, target_sync=5)

# Q-list of the fixture state under the fixture params, produced by oracles.q_forward
GOLDEN_Q = np.array([-0.10288252, 0.02154693, 0.0411857])


def _fixture():
    rng = np.random.default_rng(2024)
    store = dqn.init_store(SPEC, (1.0, 3.0, 2.0), rng)
    randomize_biases(store, rng)
    x = np.zeros((3, 8, 10))
    x[0, 3, 4] = 1
    x[1, 0, 2] = 2
    x[1, 5, 9] = 1
    x[2, 6, 1] = 1
    x[2, 2, 7] = 1
    return store, x


def test_golden_q_list():
    store, x = _fixture()
    q = dqn.q_values(AgentState(*x), store, SPEC)
    np.testing.assert_allclose(q, GOLDEN_Q, atol=1e-6)
    np.testing.assert_allclose(oracles.q_forward(x, store), GOLDEN_Q, atol=1e-7)


def test_flat_encoder_matches_reference():
    spec = DqnSpec(IeseSpec(8, 10), use_iese=False)
    rng = np.random.default_rng(1)
    store = dqn.init_store(spec, (1.0, 3.0, 2.0), rng)
    randomize_biases(store, rng)
    _, x = _fixture()
    np.testing.assert_allclose(dqn.q_values(AgentState(*x), store, spec), oracles.q_forward(x, store), atol=1e-6)


def test_identical_states_identical_q():
    store, x = _fixture()
    s = AgentState(*x)
    assert np.array_equal(dqn.q_values(s, store, SPEC), dqn.q_values(s, store, SPEC))


def test_zero_head_gives_zero_q():
    store, x = _fixture()
    for name in ("head.1.w", "head.1.b"):
        store.params[name][...] = 0
    assert dqn.q_values(AgentState(*x), store, SPEC).tolist() == [0.0, 0.0, 0.0]


def test_select_action_rules(rng):
    mask = np.array([True, True, True])
    assert dqn.select_action(np.array([5.0, 5.0, 1.0]), mask, 0.0, rng) == 0
    assert dqn.select_action(np.array([0.1, 0.9, 0.3]), mask, 0.0, rng) == 1
    assert dqn.select_action(np.array([9.0, 0.5, 0.1]), np.array([False, True, True]), 0.0, rng) == 1


def test_uniform_exploration_frequencies():
    rng = np.random.default_rng(77)
    counts = np.bincount([dqn.select_action(np.array([3.0, 1.0, 2.0]), np.ones(3, bool), 1.0, rng)
                          for _ in range(30_000)], minlength=3)
    assert np.all(np.abs(counts / 30_000 - 1 / 3) <= 0.01)


def _exp(i, shape=(3, 4, 3), terminal=False):
    s = np.full(shape, i % 7)
    return Experience(s, i % 3, float(i), s, terminal)


def test_replay_evicts_oldest():
    buf = ReplayBuffer(2, (3, 4, 3))
    for i in range(3):
        buf.store(_exp(i))
    assert [e.reward for e in buf.items()] == [1.0, 2.0]


def test_full_sample_returns_everything_once(rng):
    buf = ReplayBuffer(10, (3, 4, 3))
    for i in range(5):
        buf.store(_exp(i))
    assert buf.sample(6, rng) is None
    batch = buf.sample(5, rng)
    assert sorted(batch.rewards.tolist()) == [0.0, 1.0, 2.0, 3.0, 4.0]


def test_replay_sampling_is_uniform():
    buf = ReplayBuffer(10, (3, 4, 3))
    for i in range(10):
        buf.store(_exp(i))
    rng = np.random.default_rng(3)
    counts = np.zeros(10)
    for _ in range(100_000):
        np.add.at(counts, buf.sample(4, rng).rewards.astype(int), 1)
    freq = counts / counts.sum()
    assert np.all(np.abs(freq - 0.1) <= 0.02 * 0.1)


def test_replay_state_dict_round_trip():
    buf = ReplayBuffer(4, (3, 4, 3))
    for i in range(6):
        buf.store(_exp(i))
    other = ReplayBuffer(4, (3, 4, 3))
    other.load_state_dict(buf.state_dict())
    assert [e.reward for e in other.items()] == [e.reward for e in buf.items()]


def _agent(seed=0):
    rng = np.random.default_rng(seed)
    agent = AgentParams.create(TOY, (1.0, 2.0, 2.0), rng)
    randomize_biases(agent.primary, rng)
    agent.target = agent.primary.copy()
    return agent


def _batch(rng, n=6, terminal=None):
    states = rng.integers(0, 2, size=(n, 3, 4, 3))
    nxt = rng.integers(0, 2, size=(n, 3, 4, 3))
    mask = rng.random((n, 3)) < 0.8
    mask[np.arange(n), rng.integers(0, 3, size=n)] = True
    return Batch(states, rng.integers(0, 3, size=n), rng.normal(size=n), nxt,
                 np.zeros(n, bool) if terminal is None else terminal, mask)


def test_terminal_sample_has_no_bootstrap():
    agent = _agent()
    for name in ("head.1.w", "head.1.b"):
        agent.primary.params[name][...] = 0
    agent.target = agent.primary.copy()
    x = np.zeros((1, 3, 4, 3))
    batch = Batch(x, np.array([0]), np.array([1.0]), x, np.array([True]), np.ones((1, 3), bool))
    assert dqn.learn_step(agent, batch, 0.0, 0.001) == pytest.approx(1.0)


def test_terminal_loss_is_gamma_invariant(rng):
    batch = _batch(rng, terminal=np.ones(6, bool))
    losses = [dqn.learn_step(_agent(), batch, g, 0.001) for g in (0.0, 0.5, 0.95)]
    assert losses[0] == losses[1] == losses[2]
    nonterminal = _batch(np.random.default_rng(9))
    assert dqn.learn_step(_agent(), nonterminal, 0.0, 0.001) != dqn.learn_step(_agent(), nonterminal, 0.95, 0.001)


def test_duplicated_batch_same_loss_and_direction(rng):
    batch = _batch(rng)
    a, b = _agent(), _agent()
    before = a.primary.copy()
    la = dqn.learn_step(a, batch, 0.9, 0.001)
    lb = dqn.learn_step(b, batch.repeat(3), 0.9, 0.001)
    assert la == pytest.approx(lb, rel=1e-6)
    for name in before.names():
        da = a.primary.params[name] - before.params[name]
        db = b.primary.params[name] - before.params[name]
        np.testing.assert_allclose(da, db, atol=1e-7)


def test_reported_loss_matches_reference(rng):
    agent = _agent()
    batch = _batch(rng)
    q_next = np.array([oracles.q_forward(s, agent.target) for s in batch.next_states])
    best = np.where(batch.next_mask, q_next, -np.inf).max(axis=1)
    y = batch.rewards + 0.9 * np.where(batch.terminal, 0.0, best)
    q = np.array([oracles.q_forward(s, agent.primary) for s in batch.states])
    expected = np.mean((q[np.arange(6), batch.actions] - y) ** 2)
    assert dqn.learn_step(agent, batch, 0.9, 0.001) == pytest.approx(expected, abs=1e-5)


def test_loss_non_increasing_on_repeated_batch(rng):
    agent = _agent()
    agent.spec = DqnSpec(TOY.encoder, hidden=8, target_sync=10_000)
    batch = _batch(rng)
    losses = [dqn.learn_step(agent, batch, 0.9, 0.001) for _ in range(50)]
    assert all(l >= 0 for l in losses)
    assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))


def test_target_sync_period():
    agent = _agent()
    rng = np.random.default_rng(4)
    for k in range(1, 6):
        dqn.learn_step(agent, _batch(rng), 0.9, 0.01)
        same = nn.dumps_params(agent.primary) == nn.dumps_params(agent.target)
        assert same == (k == 5)
    states = rng.integers(0, 2, size=(20, 3, 4, 3))
    with nn.no_grad():
        qa = dqn.q_values_batch(states, agent.primary, TOY).data
        qb = dqn.q_values_batch(states, agent.target, TOY).data
    assert np.array_equal(qa.argmax(1), qb.argmax(1))


def test_clipped_step_bounds_parameter_change(rng):
    agent = _agent()
    batch = _batch(rng)
    batch = Batch(batch.states, batch.actions, batch.rewards * 1e4, batch.next_states, batch.terminal, batch.next_mask)
    before = agent.primary.copy()
    dqn.learn_step(agent, batch, 0.9, 0.001, max_grad_norm=1.0)
    moved = np.sqrt(sum(np.sum((agent.primary.params[n] - before.params[n]) ** 2) for n in before.names()))
    assert moved <= 0.001 + 1e-6
