"""Digital-twin loop: BCD over power and phases, DQN flight deduction, synchronization."""
from dataclasses import dataclass, field, replace
import logging
import math

import numpy as np

from .channel import SimContext, sim_cross_gains, rates_from_cross_gains, channel_tensor
from .dqn import FlightTask, reward, run_training
from .errors import InfeasibleSlotError
from .flight import (FlightState, Obstacle, advance, centerline_deviation, constraint_violations,
                     min_pairwise_separation, moving_targets, obstacle_array, obstacle_clearance,
                     rollout)
from .phase import gradient_ascent, random_phases, wrap_phases
from .power import prox_linear

log = logging.getLogger(__name__)

MODES = ("joint", "power-only", "phase-only")


class RunAborted(RuntimeError):
    """The loop hit an infeasible power slot or a constraint breach."""


@dataclass(frozen=True)
class LoopConfig:
    outer_rounds: int = 3          # t_max
    bcd_tol: float = 1e-3          # epsilon_thr
    bcd_max_rounds: int = 30
    power_iters: int = 20          # t_max^a
    phase_tol: float = 1e-4        # epsilon_thr^b
    phase_max_iters: int = 500
    dqn_rounds: int = 1            # i_max
    sync_count: int = 0            # evenly spaced syncs during the physical flight
    deduce_episodes: int = 100     # DQN episodes for each in-flight re-deduction
    deduce_epsilon: float = 0.05   # starting epsilon of a warm-started re-deduction (None: full schedule)
    warm_start: bool = True
    sensing_range: float = 200.0   # obstacles within this distance are reported at a sync
    process_noise: float = 0.5     # metres per slot in the physical world
    twin_seed: int = None          # None: derived from the scenario seed
    physical_seed: int = None

    def __post_init__(self):
        from .errors import ConfigError
        if self.outer_rounds < 1:
            raise ConfigError("loop.outer_rounds", "must be >= 1")
        if not self.bcd_tol > 0:
            raise ConfigError("loop.bcd_tol", "must be > 0")
        if self.sync_count < 0:
            raise ConfigError("loop.sync_count", "must be >= 0")
        if self.dqn_rounds < 1:
            raise ConfigError("loop.dqn_rounds", "must be >= 1")


# ---------------------------------------------------------------------------
# Communication block


@dataclass
class CommResult:
    p: np.ndarray
    theta: np.ndarray
    trace: list = field(default_factory=list)
    stalled: bool = False

    @property
    def total_rate(self):
        return self.trace[-1]


def _total_rate(ctx, theta, p):
    return float(rates_from_cross_gains(sim_cross_gains(ctx.gains(theta)), p, ctx.sigma2).sum())


def bcd_communication(ctx, rng, mode="joint", theta0=None, p0=None, cfg=LoopConfig()):
    """Alternate the power and phase blocks until the total rate settles.

    ``mode`` "power-only" freezes phases at zero and "phase-only" freezes the
    uniform split. Warm starts (``theta0``, ``p0``) keep the trace monotone
    across calls.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    N = ctx.num_slots
    L = ctx.W.shape[0] + 1
    K, M = ctx.feeds.shape[1], ctx.feeds.shape[0]
    if mode == "power-only":
        theta = np.zeros((N, L, K))
    elif theta0 is not None:
        theta = wrap_phases(np.array(theta0, dtype=float))
    else:
        theta = random_phases(rng, (N, L, K))
    uniform = np.full((N, M), ctx.total_power / M)
    p = uniform if (mode == "phase-only" or p0 is None) else np.array(p0, dtype=float)
    trace = [_total_rate(ctx, theta, p)]
    stale = 0
    stalled = False
    for _ in range(cfg.bcd_max_rounds):
        if mode != "phase-only":
            g = sim_cross_gains(ctx.gains(theta))
            p = prox_linear(g, ctx.total_power, ctx.sigma2, cfg.power_iters, p0=p).p
        if mode != "power-only":
            theta = gradient_ascent(ctx, theta, p, cfg.phase_tol, cfg.phase_max_iters).theta
        val = _total_rate(ctx, theta, p)
        gain = val - trace[-1]
        trace.append(val)
        stale = stale + 1 if gain <= 0 else 0
        if stale >= 3:
            stalled = True
            log.warning("BCD stopped after 3 rounds without improvement")
            break
        if abs(gain) < cfg.bcd_tol:
            break
    return CommResult(p=p, theta=theta, trace=trace, stalled=stalled)


# ---------------------------------------------------------------------------
# Trajectories


def initial_trajectory(corridor, num_slots):
    """Per-eVTOL path along the centerline from entry to exit, pinned at both ends.

    Arc positions are evenly spaced between the entry and exit projections and
    the lateral offset of the entry blends linearly into that of the exit.
    """
    ent, ext = np.array(corridor.entries), np.array(corridor.exits)
    p_ent, _, s_ent = corridor.project(ent)
    p_ext, _, s_ext = corridor.project(ext)
    w = np.linspace(0.0, 1.0, num_slots + 1)[:, None]
    s = s_ent[None, :] * (1 - w) + s_ext[None, :] * w
    base = corridor.point_at(s)
    off = (ent - p_ent)[None] * (1 - w[..., None]) + (ext - p_ext)[None] * w[..., None]
    traj = base + off
    traj[0], traj[-1] = ent, ext
    return traj


def slot_rate_fn(ctx_geom, chan, station, theta, p):
    """(slot, positions) -> platoon sum rate at slot n >= 1 under the given schedules."""
    from .channel import inter_layer_stack, build_feed_vectors
    W = inter_layer_stack(ctx_geom)
    feeds = np.ascontiguousarray(build_feed_vectors(ctx_geom))

    def fn(n, q):
        if n < 1 or n > len(p):
            return 0.0
        h = np.ascontiguousarray(channel_tensor(q, station, chan, ctx_geom)[None])
        ctx = SimContext(W=W, feeds=feeds, h=h, sigma2=chan.noise_power, total_power=station.total_power)
        return _total_rate(ctx, theta[n - 1:n], p[n - 1:n])

    return fn


# ---------------------------------------------------------------------------
# Flight deduction and synchronization


@dataclass
class Deduction:
    cpf: object
    trajectory: np.ndarray
    deviation_trace: list
    reward_trace: list
    net: object


def deduce_flight(scn, cpf, theta, p, rng, known_obstacles=(), start=None, episodes=None,
                  net=None, use_rate=True, epsilon=None):
    """Tune the CPF gains by DQN, then roll them out to get the twin trajectory."""
    dqn_cfg = scn.dqn if episodes is None else replace(scn.dqn, episodes=episodes)
    if epsilon is not None:
        dqn_cfg = replace(dqn_cfg, epsilon_start=max(epsilon, dqn_cfg.epsilon_end))
    rate_fn = slot_rate_fn(scn.geometry, scn.channel, scn.station, theta, p) if use_rate else None
    task = FlightTask(scn.corridor, scn.kinematics, cpf, scn.num_slots, tuple(known_obstacles),
                      start, rate_fn)
    reward = replace(scn.reward, use_rate=scn.reward.use_rate and use_rate)
    res = run_training(task, dqn_cfg, rng, reward, net)
    traj = rollout(scn.corridor, res.cpf, scn.kinematics, scn.num_slots, known_obstacles,
                   state=start).positions
    return Deduction(res.cpf, traj, res.deviation_trace, res.reward_trace, res.net)


def plan_return(scn, cpf, start, obstacles, rate_fn=None, use_rate=True):
    """Undiscounted reward of flying ``cpf`` unchanged from ``start`` in the twin."""
    roll = rollout(scn.corridor, cpf, scn.kinematics, scn.num_slots, obstacles, state=start)
    n0 = 0 if start is None else start.n
    params = replace(scn.reward, use_rate=scn.reward.use_rate and use_rate and rate_fn is not None)
    total = 0.0
    for k in range(1, len(roll.positions)):
        n = n0 + k
        q, v = roll.positions[k], roll.velocities[k]
        rate = rate_fn(n, q) if params.use_rate else 0.0
        total += float(reward(q, v, moving_targets(scn.corridor, n, scn.kinematics), cpf, params,
                              rate).sum())
    return total, roll.positions


@dataclass
class TwinState:
    trajectory: np.ndarray        # (N+1, M, 3) deduced twin positions
    p: np.ndarray
    theta: np.ndarray
    cpf: object
    known_obstacles: list = field(default_factory=list)
    divergence: list = field(default_factory=list)


def synchronize(twin, phys_state, obstacles, sensing_range):
    """Log divergence, adopt the physical state, and report nearby obstacles.

    Returns the twin state the next deduction starts from.
    """
    n = phys_state.n
    before = np.linalg.norm(twin.trajectory[n] - phys_state.q, axis=1)
    twin.trajectory = twin.trajectory.copy()
    twin.trajectory[n] = phys_state.q
    after = np.linalg.norm(twin.trajectory[n] - phys_state.q, axis=1)
    for o in obstacles:
        if o in twin.known_obstacles:
            continue
        d = np.linalg.norm(phys_state.q - np.array(o.center), axis=1) - o.radius
        if d.min() <= sensing_range:
            twin.known_obstacles.append(o)
    twin.divergence.append({"slot": int(n), "before": before.tolist(), "after": after.tolist()})
    return phys_state.copy()


def sync_slots(num_slots, sync_count):
    """Slots at which syncs happen: evenly spaced inside (0, N)."""
    if sync_count <= 0:
        return []
    slots = sorted({int(round(k * num_slots / (sync_count + 1))) for k in range(1, sync_count + 1)})
    return [s for s in slots if 0 < s < num_slots]


# ---------------------------------------------------------------------------
# Full loop


@dataclass
class RunReport:
    rates: np.ndarray                 # (N, M) nats, physical trajectory
    twin_trajectory: np.ndarray       # (N+1, M, 3)
    physical_trajectory: np.ndarray   # (N+1, M, 3)
    mean_deviation: float
    min_separation: float
    divergence: list
    gains: np.ndarray                 # (M, 3) last delivered k_tar, k_sep, k_com
    bcd_trace: list
    deviation_trace: list
    reward_trace: list
    p: np.ndarray
    theta: np.ndarray
    obstacle_clearance: float = float("inf")
    violations: dict = field(default_factory=dict)

    @property
    def total_rate(self):
        return float(self.rates.sum())


def check_constraints(p, theta, traj, corridor, kin, total_power):
    """Counts of C1..C6 breaches for delivered schedules and a trajectory."""
    out = {"C1": int((p.sum(-1) > total_power * (1 + 1e-12)).sum()),
           "C2": int((p < 0).sum()),
           "C3": int(((theta < 0) | (theta >= 2 * np.pi)).sum())}
    out.update(constraint_violations(traj, corridor, kin))
    return out


def _comm_block(scn, traj, rng, theta, p, cfg):
    ctx = SimContext.build(scn.geometry, scn.channel, scn.station, traj[1:])
    try:
        return bcd_communication(ctx, rng, "joint", theta, p, cfg)
    except InfeasibleSlotError as exc:
        raise RunAborted(f"infeasible power slot: {exc}") from exc


def run(scn, cfg=None, use_comm_reward=True):
    """Pre-flight deduction, then a physical flight with ``cfg.sync_count`` syncs."""
    cfg = scn.loop if cfg is None else cfg
    N = scn.num_slots
    corridor, kin = scn.corridor, scn.kinematics
    seeds = np.random.SeedSequence(scn.seed).spawn(2)
    twin_rng = np.random.default_rng(seeds[0] if cfg.twin_seed is None else cfg.twin_seed)
    phys_rng = np.random.default_rng(seeds[1] if cfg.physical_seed is None else cfg.physical_seed)

    traj = initial_trajectory(corridor, N)
    theta = p = net = None
    cpf = scn.cpf.copy()
    bcd_trace, dev_trace, rew_trace = [], [], []
    for _ in range(cfg.outer_rounds):
        comm = _comm_block(scn, traj, twin_rng, theta, p, cfg)
        theta, p = comm.theta, comm.p
        bcd_trace.extend(comm.trace if not bcd_trace else comm.trace[1:])
        for _ in range(cfg.dqn_rounds):
            ded = deduce_flight(scn, cpf, theta, p, twin_rng, (), None, None,
                                net if cfg.warm_start else None, use_comm_reward)
            cpf, net = ded.cpf, ded.net
            dev_trace, rew_trace = ded.deviation_trace, ded.reward_trace
        traj = ded.trajectory
    twin = TwinState(traj, p.copy(), theta.copy(), cpf.copy())

    # physical flight with the delivered parameters
    delivered = {"cpf": cpf.copy(), "p": p.copy(), "theta": theta.copy()}
    obs_all = obstacle_array(scn.obstacles)
    phys = FlightState.at_entry(corridor)
    phys_traj = [phys.q.copy()]
    used_p, used_theta = np.zeros_like(p), np.zeros_like(theta)
    syncs = set(sync_slots(N, cfg.sync_count))
    while phys.n < N:
        if phys.n in syncs:
            start = synchronize(twin, phys, scn.obstacles, cfg.sensing_range)
            twin.trajectory[:phys.n + 1] = np.array(phys_traj)
            comm = _comm_block(scn, twin.trajectory, twin_rng, twin.theta, twin.p, cfg)
            twin.theta, twin.p = comm.theta, comm.p
            ded = deduce_flight(scn, twin.cpf, twin.theta, twin.p, twin_rng, twin.known_obstacles,
                                start, cfg.deduce_episodes, net if cfg.warm_start else None,
                                use_comm_reward, cfg.deduce_epsilon)
            net = ded.net
            # the twin vets the re-tuned gains against the incumbent before delivering them
            rate_fn = slot_rate_fn(scn.geometry, scn.channel, scn.station, twin.theta, twin.p)
            new_ret, new_path = plan_return(scn, ded.cpf, start, twin.known_obstacles, rate_fn,
                                            use_comm_reward)
            old_ret, old_path = plan_return(scn, twin.cpf, start, twin.known_obstacles, rate_fn,
                                            use_comm_reward)
            if new_ret >= old_ret:
                twin.cpf, path = ded.cpf, new_path
            else:
                path = old_path
                log.info("sync at slot %d kept the incumbent gains (%.4g < %.4g)", phys.n, new_ret, old_ret)
            twin.trajectory = np.concatenate([np.array(phys_traj), path[1:]])
            comm = _comm_block(scn, twin.trajectory, twin_rng, twin.theta, twin.p, cfg)
            twin.theta, twin.p = comm.theta, comm.p
            delivered = {"cpf": twin.cpf.copy(), "p": twin.p.copy(), "theta": twin.theta.copy()}
        phys = advance(phys, corridor, delivered["cpf"], kin, N, obs_all, cfg.process_noise, phys_rng)
        used_p[phys.n - 1] = delivered["p"][phys.n - 1]
        used_theta[phys.n - 1] = delivered["theta"][phys.n - 1]
        phys_traj.append(phys.q.copy())
    phys_traj = np.array(phys_traj)

    ctx = SimContext.build(scn.geometry, scn.channel, scn.station, phys_traj[1:])
    rates = rates_from_cross_gains(sim_cross_gains(ctx.gains(used_theta)), used_p, ctx.sigma2)
    viol = check_constraints(used_p, used_theta, phys_traj, corridor, kin, scn.station.total_power)
    report = RunReport(rates=rates, twin_trajectory=twin.trajectory, physical_trajectory=phys_traj,
                       mean_deviation=centerline_deviation(phys_traj, corridor),
                       min_separation=min_pairwise_separation(phys_traj),
                       divergence=twin.divergence, gains=delivered["cpf"].gains,
                       bcd_trace=bcd_trace, deviation_trace=dev_trace, reward_trace=rew_trace,
                       p=used_p, theta=used_theta,
                       obstacle_clearance=obstacle_clearance(phys_traj, scn.obstacles),
                       violations=viol)
    if any(viol.values()):
        raise RunAborted(f"constraint violations in the physical flight: {viol}")
    return report


def train_cpf(scn, use_comm_reward=True):
    """Stand-alone CPF tuning: BCD schedules on the initial path, then one DQN training run."""
    seeds = np.random.SeedSequence(scn.seed).spawn(2)
    rng = np.random.default_rng(seeds[0])
    traj = initial_trajectory(scn.corridor, scn.num_slots)
    theta = p = None
    if use_comm_reward:
        comm = _comm_block(scn, traj, rng, None, None, scn.loop)
        theta, p = comm.theta, comm.p
    return deduce_flight(scn, scn.cpf.copy(), theta, p, rng, scn.obstacles, use_rate=use_comm_reward)
