import hashlib

import numpy as np
import pytest

from simdt.dqn import (DQNConfig, FlightTask, QNetwork, ReplayBuffer, RewardParams, apply_action,
                       encode_state, enumerate_actions, is_terminal, q_forward, reward,
                       run_training, sync_target, train_step)
from simdt.errors import ConfigError
from simdt.flight import CPFParams, KinematicParams
from simdt.scenario import default_corridor

KIN = KinematicParams()


def digest(net):
    h = hashlib.sha256()
    for p in net.params():
        h.update(p.tobytes())
    return h.hexdigest()


def test_encode_state():
    tg = np.array([[1.0, 2, 3], [4, 5, 6]])
    s = encode_state(tg, tg)
    assert len(s) == 3 + 3 * 2 and np.all(s[3:] == 0)
    q = np.array([[0.0, 1, 2], [9, 9, 9]])
    perm = encode_state(q[::-1], tg[::-1])
    base = encode_state(q, tg)
    assert np.array_equal(perm[3:6], base[6:9]) and np.array_equal(perm[6:9], base[3:6])


def test_actions():
    assert len(enumerate_actions(1)) == 9 and len(enumerate_actions(4)) == 36
    with pytest.raises(ValueError):
        enumerate_actions(0)
    g = np.array([[0.0, 1.0, 2.0]])
    for act in enumerate_actions(1):
        if act[2] == 0:
            assert np.array_equal(apply_action(g, act), g)
    assert apply_action(g, (0, 0, -0.06))[0, 0] == 0.0
    assert np.isclose(apply_action(g, (0, 1, 0.06))[0, 1], 1.06)
    assert apply_action(g, (0, 2, 0.06), ceiling=(None, None, 2.0))[0, 2] == 2.0
    assert g[0, 0] == 0.0  # input untouched


def test_reward_examples():
    cpf = CPFParams.uniform(1, 0.1, 1.0, 0.1)
    prm = RewardParams(alpha1=1.0, alpha2=0.1)
    r = reward([[0.0, 0, 0]], [[1.0, 0, 0]], [[10.0, 0, 0]], cpf, prm, rate_sum=2.0)
    assert np.isclose(r[0], 4.0)
    assert reward([[0.0, 0, 0]], [[0.0, 0, 0]], [[10.0, 0, 0]], cpf, RewardParams(), 0.0)[0] == 0


def test_reward_separation_term():
    cpf = CPFParams.uniform(2, 0.1, 1.0, 0.1, d_sep=15.0)
    prm = RewardParams(alpha1=0.0, beta_rw=-1.0, use_rate=False)
    q = [[0.0, 0, 0], [5.0, 0, 0]]
    v = [[-2.0, 0, 0], [0.0, 0, 0]]     # eVTOL 0 flees its neighbour at 2 m/s
    r = reward(q, v, q, cpf, prm)
    assert np.allclose(r, [-2.0 / 5.0, 0.0])
    far = reward([[0.0, 0, 0], [50.0, 0, 0]], v, q, cpf, prm)
    assert np.all(far == 0)


def test_forward_basics():
    net = QNetwork((5, 4, 9), zero=True)
    assert np.all(q_forward(net, np.ones(5)) == 0) and net.num_actions == 9
    with pytest.raises(ValueError):
        q_forward(net, np.ones(4))


def test_backprop_matches_finite_difference():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(5):
        net = QNetwork((4, 6, 5, 3), rng)
        for b in net.biases:
            b += rng.normal(0, 0.3, b.shape)
        s = rng.normal(size=(7, 4))
        a = rng.integers(0, 3, 7)
        y = rng.normal(size=7)
        _, gW, gb = net.loss_and_grads(s, a, y)
        for P, G in zip(net.params(), gW + gb):
            for idx in np.ndindex(P.shape):
                old = P[idx]
                P[idx] = old + 1e-6
                up = net.loss_and_grads(s, a, y)[0]
                P[idx] = old - 1e-6
                dn = net.loss_and_grads(s, a, y)[0]
                P[idx] = old
                fd = (up - dn) / 2e-6
                if abs(fd) > 1e-7 or abs(G[idx]) > 1e-7:
                    worst = max(worst, abs(fd - G[idx]) / max(abs(fd), abs(G[idx])))
    assert worst < 1e-4


def test_bellman_consistency_gamma_zero():
    rng = np.random.default_rng(4)
    net = QNetwork((3, 16, 2), rng)
    states = np.repeat(np.eye(3), 4, axis=0)
    actions = np.tile([0, 1], 6)
    rewards = rng.normal(size=12)
    batch = (states, actions, rewards, states, np.zeros(12, bool))
    for _ in range(6000):
        train_step(net, net.clone(), batch, 0.0, 0.05)
    q = net.forward(np.eye(3))
    for k in range(3):
        for a in range(2):
            m = (states[:, k] == 1) & (actions == a)
            assert abs(q[k, a] - rewards[m].mean()) < 1e-3


def test_terminal_target_is_reward():
    rng = np.random.default_rng(5)
    net, tgt = QNetwork((2, 4, 2), rng), QNetwork((2, 4, 2), rng)
    s = np.array([[0.3, -0.2]])
    r = np.array([1.5])
    # a learning rate of zero leaves the net alone; the loss reveals which target was used
    term = train_step(net, tgt, (s, np.array([0]), r, s, np.array([True])), 0.9, 0.0)
    assert np.isclose(term, (net.forward(s)[0, 0] - 1.5) ** 2)
    g0 = train_step(net, tgt, (s, np.array([0]), r, s, np.array([False])), 0.0, 0.0)
    assert np.isclose(g0, term)
    with pytest.raises(ValueError):
        train_step(net, tgt, (s[:0], np.array([], int), r[:0], s[:0], np.array([], bool)), 0.9, 0.1)


def test_single_transition_loss_decreases():
    rng = np.random.default_rng(6)
    net, tgt = QNetwork((2, 8, 3), rng), QNetwork((2, 8, 3), rng)
    batch = (np.array([[0.5, 1.0]]), np.array([2]), np.array([3.0]), np.array([[0.0, 1.0]]),
             np.array([False]))
    before = train_step(net, tgt, batch, 0.9, 1e-3)
    after = train_step(net, tgt, batch, 0.9, 0.0)
    assert after < before


def test_sync_target():
    rng = np.random.default_rng(7)
    net, tgt = QNetwork((3, 5, 2), rng), QNetwork((3, 5, 2), rng)
    sync_target(net, tgt)
    s = rng.normal(size=(4, 3))
    assert np.array_equal(net.forward(s), tgt.forward(s))
    h = digest(tgt)
    sync_target(net, tgt)
    assert digest(tgt) == h
    batch = (s, np.array([0, 1, 0, 1]), np.ones(4), s, np.zeros(4, bool))
    for _ in range(5):
        train_step(net, tgt, batch, 0.9, 0.01)
    assert digest(tgt) == h and digest(net) != h
    with pytest.raises(ValueError):
        sync_target(QNetwork((3, 4, 2), rng), tgt)


def test_replay_uniformity():
    buf = ReplayBuffer(100, 1)
    for i in range(150):
        buf.push([i], 0, float(i), [i], False)
    assert len(buf) == 100
    rng = np.random.default_rng(8)
    counts = np.zeros(150)
    for _ in range(10_000):
        s, *_ = buf.sample(rng, 10)
        assert len(np.unique(s)) == 10
        counts[s[:, 0].astype(int)] += 1
    assert np.all(counts[:50] == 0)  # overwritten by the ring
    p = 0.01
    assert np.all(np.abs(counts[50:] - 1e5 * p) < 3 * np.sqrt(1e5 * p * (1 - p)))


def test_terminal_predicate():
    c = default_corridor(2)
    ex = np.array(c.exits)
    assert is_terminal(ex, c, KIN)
    assert is_terminal(ex + [[2 * KIN.max_step - 1e-9, 0, 0], [0, 0, 0]], c, KIN)
    assert not is_terminal(ex + [[2 * KIN.max_step + 1e-3, 0, 0], [0, 0, 0]], c, KIN)


def test_config_validation():
    with pytest.raises(ConfigError):
        DQNConfig(discount=1.0)
    with pytest.raises(ConfigError):
        DQNConfig(action_delta=0.1)
    with pytest.raises(ConfigError):
        DQNConfig(epsilon_start=1.5)
    cfg = DQNConfig(episodes=10)
    assert cfg.epsilon(0) == 1.0 and np.isclose(cfg.epsilon(6), 0.05) and np.isclose(cfg.epsilon(9), 0.05)


def small_task():
    c = default_corridor(2)
    return FlightTask(c, KIN, CPFParams.uniform(2, 0.03, 25.0, 0.015, d_sep=15.0, d_com=25.0,
                                                d_max=60.0), 30)


def test_training_is_seeded_and_reproducible():
    cfg = DQNConfig(episodes=6, batch_size=8, buffer_capacity=100, hidden=(16, 16))
    a = run_training(small_task(), cfg, np.random.default_rng(11))
    b = run_training(small_task(), cfg, np.random.default_rng(11))
    assert np.array_equal(a.cpf.gains, b.cpf.gains)
    assert a.deviation_trace == b.deviation_trace and len(a.deviation_trace) == 6
    assert a.reward_trace[a.best_episode] == max(a.reward_trace)


def test_random_policy_uses_all_actions():
    cfg = DQNConfig(episodes=4, epsilon_start=1.0, epsilon_end=1.0, batch_size=8,
                    buffer_capacity=200, hidden=(8,))
    task = small_task()
    res = run_training(task, cfg, np.random.default_rng(12))
    assert np.all(np.isfinite(res.cpf.gains)) and np.all(res.cpf.gains >= 0)


@pytest.mark.parametrize("observe, width", [(True, 3 + 6 + 6), (False, 3 + 6)])
def test_network_input_width(observe, width):
    cfg = DQNConfig(episodes=2, batch_size=4, buffer_capacity=50, hidden=(8,), observe_gains=observe)
    res = run_training(small_task(), cfg, np.random.default_rng(13))
    assert res.net.layer_sizes == (width, 8, 18)
