"""Deep Q-learning tuner for the CPF gains.

The network is a small ReLU MLP with hand-written backpropagation. Each action
nudges one gain of one eVTOL by +delta, -delta or 0, so there are 9M actions.
A tabular Q update is not kept separately; the network regression replaces it.
"""
from dataclasses import dataclass, field
import logging

import numpy as np

from .errors import ConfigError
from .flight import (FlightState, CPFParams, advance, centerline_deviation, moving_targets,
                     obstacle_array)

log = logging.getLogger(__name__)

GAIN_NAMES = ("k_tar", "k_sep", "k_com")


@dataclass(frozen=True)
class DQNConfig:
    learning_rate: float = 1e-3
    discount: float = 0.9
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_fraction: float = 0.6   # share of episodes over which epsilon decays linearly
    batch_size: int = 64
    buffer_capacity: int = 10_000
    target_sync: int = 100
    episodes: int = 500
    steps_per_episode: int = None          # None: one step per remaining slot
    hidden: tuple = (64, 64)
    action_delta: float = 0.06
    reward_scale: float = 0.01             # rewards are multiplied by this before regression
    grad_clip: float = 10.0
    state_scale: float = 100.0             # metres per unit of network input
    gain_ceiling: tuple = (2.0, None, 2.0)  # per gain (k_tar, k_sep, k_com); None = uncapped
    episode_start: str = "previous"        # gains each episode starts from: initial | previous | best
    observe_gains: bool = True             # append the current gains to the network input

    def __post_init__(self):
        if not 0 < self.discount < 1:
            raise ConfigError("dqn.discount", "must lie in (0, 1)")
        for name in ("epsilon_start", "epsilon_end"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"dqn.{name}", "must lie in [0, 1]")
        if self.action_delta != 0.06:
            raise ConfigError("dqn.action_delta", "fixed at 0.06")
        if self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise ConfigError("dqn.batch_size", "need 1 <= batch_size <= buffer_capacity")
        if self.episodes < 1:
            raise ConfigError("dqn.episodes", "must be >= 1")
        if self.target_sync < 1:
            raise ConfigError("dqn.target_sync", "must be >= 1")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.episode_start not in ("initial", "previous", "best"):
            raise ConfigError("dqn.episode_start", "must be initial, previous or best")

    def epsilon(self, episode):
        span = max(1.0, self.epsilon_decay_fraction * self.episodes)
        frac = min(1.0, episode / span)
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)


@dataclass(frozen=True)
class RewardParams:
    alpha1: float = 1.0
    alpha2: float = -0.01                 # negative: distance to the moving target is penalized
    beta_rw: float = -1.0
    use_rate: bool = True

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "beta_rw"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigError(f"reward.{name}", "must be finite")


# ---------------------------------------------------------------------------
# Network


class QNetwork:
    def __init__(self, layer_sizes, rng=None, zero=False):
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        self.weights, self.biases = [], []
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            if zero:
                W = np.zeros((n_in, n_out))
            else:
                lim = np.sqrt(6.0 / n_in)  # He-uniform for ReLU
                W = rng.uniform(-lim, lim, (n_in, n_out))
            self.weights.append(W)
            self.biases.append(np.zeros(n_out))

    @property
    def num_actions(self):
        return self.layer_sizes[-1]

    def params(self):
        return self.weights + self.biases

    def copy_from(self, other):
        if other.layer_sizes != self.layer_sizes:
            raise ValueError("network shapes differ")
        self.weights = [w.copy() for w in other.weights]
        self.biases = [b.copy() for b in other.biases]

    def clone(self):
        net = QNetwork(self.layer_sizes, zero=True)
        net.copy_from(self)
        return net

    def forward(self, x, cache=False):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.layer_sizes[0]:
            raise ValueError(f"state width {x.shape[-1]} != input width {self.layer_sizes[0]}")
        acts = [x]
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ W + b
            if i < last:
                x = np.maximum(x, 0.0)
            acts.append(x)
        return (x, acts) if cache else x

    def loss_and_grads(self, states, actions, targets):
        """MSE between Q(s, a) and ``targets``; returns (loss, weight grads, bias grads)."""
        out, acts = self.forward(states, cache=True)
        B = len(states)
        idx = np.arange(B)
        err = out[idx, actions] - targets
        loss = float(np.mean(err**2))
        delta = np.zeros_like(out)
        delta[idx, actions] = 2.0 * err / B
        gW, gb = [None] * len(self.weights), [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            gW[i] = acts[i].T @ delta
            gb[i] = delta.sum(0)
            if i:
                delta = (delta @ self.weights[i].T) * (acts[i] > 0)
        return loss, gW, gb


def q_forward(net, state):
    return net.forward(state)


def train_step(net, target_net, batch, discount, learning_rate, grad_clip=None):
    """One SGD step on the temporal-difference regression; returns the pre-step loss."""
    s, a, r, s2, term = batch
    if len(s) == 0:
        raise ValueError("empty batch")
    nxt = target_net.forward(s2).max(axis=1)
    y = np.where(term, r, r + discount * nxt)
    loss, gW, gb = net.loss_and_grads(s, a, y)
    scale = 1.0
    if grad_clip:
        norm = np.sqrt(sum((g**2).sum() for g in gW + gb))
        if norm > grad_clip:
            scale = grad_clip / norm
    for i in range(len(net.weights)):
        net.weights[i] -= learning_rate * scale * gW[i]
        net.biases[i] -= learning_rate * scale * gb[i]
    return loss


def sync_target(net, target_net):
    target_net.copy_from(net)
    return target_net


class ReplayBuffer:
    def __init__(self, capacity, state_dim):
        self.capacity = int(capacity)
        self.s = np.zeros((self.capacity, state_dim))
        self.s2 = np.zeros((self.capacity, state_dim))
        self.a = np.zeros(self.capacity, dtype=np.int64)
        self.r = np.zeros(self.capacity)
        self.term = np.zeros(self.capacity, dtype=bool)
        self.size = 0
        self._next = 0

    def __len__(self):
        return self.size

    def push(self, s, a, r, s2, terminal):
        i = self._next
        self.s[i], self.a[i], self.r[i], self.s2[i], self.term[i] = s, a, r, s2, terminal
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng, batch_size):
        idx = rng.choice(self.size, size=min(batch_size, self.size), replace=False)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.term[idx]


# ---------------------------------------------------------------------------
# State, actions, reward


def encode_state(q, targets, scale=1.0, origin=None):
    """[platoon target, q_i - target_i for each eVTOL] flattened, divided by ``scale``."""
    q = np.asarray(q, dtype=float)
    targets = np.asarray(targets, dtype=float)
    head = targets.mean(axis=0) - (0.0 if origin is None else np.asarray(origin))
    return np.concatenate([head, (q - targets).ravel()]) / scale


def enumerate_actions(M, delta=0.06):
    """All (eVTOL, gain index, delta) triples; 9M of them."""
    if M < 1:
        raise ValueError("need at least one eVTOL")
    return [(i, g, d) for i in range(M) for g in range(3) for d in (delta, -delta, 0.0)]


def apply_action(gains, action, ceiling=None):
    """Return a copy of the (M, 3) gain matrix with ``action`` applied and clamped.

    ``ceiling`` optionally caps each gain column; an increase never pushes a
    gain above its cap (a gain already above it is left alone).
    """
    i, g, d = action
    out = np.array(gains, dtype=float)
    new = max(0.0, out[i, g] + d)
    cap = None if ceiling is None else ceiling[g]
    if cap is not None and d > 0:
        new = max(out[i, g], min(new, cap))
    out[i, g] = new
    return out


def reward(q, v, targets, cpf, params, rate_sum=0.0):
    """Per-eVTOL reward: target progress, proximity term, and the platoon rate."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    M = len(q)
    to_t = np.asarray(targets, dtype=float) - q
    d_tar = np.linalg.norm(to_t, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(d_tar[:, None] > 0, to_t / d_tar[:, None], 0.0)
    v_tar = (v * unit).sum(1)
    r = params.alpha1 * v_tar * (1.0 + params.alpha2 * d_tar)
    if M > 1:
        diff = q[:, None] - q[None]
        d = np.linalg.norm(diff, axis=-1)
        np.fill_diagonal(d, np.inf)
        for i in range(M):
            near = np.flatnonzero(d[i] < cpf.d_sep)
            if near.size == 0:
                continue
            j = near[np.argmin(d[i, near])]
            v_sep = float(v[i] @ (diff[i, j] / d[i, j]))
            r[i] += params.beta_rw * v_sep * (1.0 / d[i, near]).sum()
    if params.use_rate:
        r = r + rate_sum
    return r


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class FlightTask:
    """What one training episode flies: corridor, start state, horizon and rate model."""

    corridor: object
    kin: object
    cpf: CPFParams
    num_slots: int
    obstacles: tuple = ()
    start: FlightState = None
    rate_fn: object = None      # (slot, positions) -> platoon sum rate

    def initial_state(self):
        return FlightState.at_entry(self.corridor) if self.start is None else self.start.copy()


@dataclass
class TrainingResult:
    cpf: CPFParams
    deviation_trace: list = field(default_factory=list)
    reward_trace: list = field(default_factory=list)
    best_episode: int = 0
    net: QNetwork = None


def is_terminal(q, corridor, kin):
    exits = np.array(corridor.exits)
    return bool(np.all(np.linalg.norm(q - exits, axis=1) <= 2 * kin.max_step))


def run_training(task, config, rng, reward_params=RewardParams(), net=None):
    """Epsilon-greedy gain tuning. Returns the final gains of the best-reward episode.

    ``config.episode_start`` picks the gains an episode begins with: the task's
    initial gains, the previous episode's final gains, or the final gains of
    the best episode so far (tuning then accumulates around the incumbent).
    Passing ``net`` warm-starts the network.
    """
    corridor, kin = task.corridor, task.kin
    M = corridor.num_evtols
    actions = enumerate_actions(M, config.action_delta)
    origin = np.array(corridor.centerline[0])
    dim = 3 + 3 * M + (3 * M if config.observe_gains else 0)
    gain_norm = np.array([c if c else 50.0 for c in (config.gain_ceiling or (None,) * 3)])
    if net is None:
        net = QNetwork((dim,) + config.hidden + (len(actions),), rng)
    target = net.clone()
    buf = ReplayBuffer(config.buffer_capacity, dim)
    obs = obstacle_array(task.obstacles)
    start = task.initial_state()
    horizon = task.num_slots - start.n
    steps = horizon if config.steps_per_episode is None else min(config.steps_per_episode, horizon)
    def enc(st, gains):
        s = encode_state(st.q, moving_targets(corridor, st.n, kin), config.state_scale, origin)
        return np.concatenate([s, (gains / gain_norm).ravel()]) if config.observe_gains else s

    result = TrainingResult(cpf=task.cpf.copy(), net=net)
    best = -np.inf
    total_steps = 0
    gains = task.cpf.gains
    for ep in range(config.episodes):
        eps = config.epsilon(ep)
        st = start.copy()
        if config.episode_start == "initial":
            gains = task.cpf.gains
        elif config.episode_start == "best":
            gains = result.cpf.gains
        s = enc(st, gains)
        ep_reward, traj = 0.0, [st.q.copy()]
        for _ in range(steps):
            if rng.random() < eps:
                a = int(rng.integers(len(actions)))
            else:
                a = int(np.argmax(net.forward(s)))
            gains = apply_action(gains, actions[a], config.gain_ceiling)
            cpf = CPFParams.from_matrix(gains, task.cpf)
            st = advance(st, corridor, cpf, kin, task.num_slots, obs)
            traj.append(st.q.copy())
            tg = moving_targets(corridor, st.n, kin)
            rate = task.rate_fn(st.n, st.q) if (task.rate_fn and reward_params.use_rate) else 0.0
            r = float(reward(st.q, st.v, tg, cpf, reward_params, rate).sum())
            ep_reward += r
            done = st.n >= task.num_slots or is_terminal(st.q, corridor, kin)
            s2 = enc(st, gains)
            buf.push(s, a, r * config.reward_scale, s2, done)
            s = s2
            total_steps += 1
            if len(buf) >= config.batch_size:
                train_step(net, target, buf.sample(rng, config.batch_size), config.discount,
                           config.learning_rate, config.grad_clip)
            if total_steps % config.target_sync == 0:
                sync_target(net, target)
            if done:
                break
        result.deviation_trace.append(centerline_deviation(np.array(traj), corridor))
        result.reward_trace.append(ep_reward)
        if ep_reward > best:
            best = ep_reward
            result.best_episode = ep
            result.cpf = CPFParams.from_matrix(gains, task.cpf)
    return result
