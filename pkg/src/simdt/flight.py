"""Composite potential field (CPF) flight dynamics inside a tube-shaped corridor."""
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import ConfigError

CONSTRAINT_TOL = 1e-9


# ---------------------------------------------------------------------------
# Geometry


@dataclass(frozen=True)
class Obstacle:
    center: tuple
    radius: float

    def __post_init__(self):
        c = tuple(float(x) for x in self.center)
        if len(c) != 3:
            raise ConfigError("obstacle.center", "need 3 coordinates")
        object.__setattr__(self, "center", c)
        if not self.radius > 0:
            raise ConfigError("obstacle.radius", "must be > 0")


def obstacle_array(obstacles):
    """(O, 4) array of centre and radius, as the force kernel expects."""
    if not obstacles:
        return np.zeros((0, 4))
    return np.array([list(o.center) + [o.radius] for o in obstacles], dtype=float)


@dataclass(frozen=True)
class Corridor:
    """Tube of fixed ``radius`` around a polyline ``centerline``.

    ``entries`` and ``exits`` hold f[0] and f[N] for every eVTOL.
    """

    centerline: tuple
    radius: float
    entries: tuple
    exits: tuple

    def __post_init__(self):
        pts = np.array(self.centerline, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
            raise ConfigError("corridor.centerline", "need at least 2 points of 3 coordinates")
        if np.any(np.linalg.norm(np.diff(pts, axis=0), axis=1) == 0):
            raise ConfigError("corridor.centerline", "repeated consecutive points")
        if not self.radius > 0:
            raise ConfigError("corridor.radius", "must be > 0")
        to_t = lambda a: tuple(tuple(float(c) for c in row) for row in a)
        object.__setattr__(self, "centerline", to_t(pts))
        ent, ext = np.array(self.entries, dtype=float), np.array(self.exits, dtype=float)
        if ent.ndim != 2 or ent.shape[1] != 3 or ext.shape != ent.shape:
            raise ConfigError("corridor.entries", "entries and exits need matching (M, 3) shapes")
        for name, arr in (("corridor.entries", ent), ("corridor.exits", ext)):
            if np.any(self.distance(arr) > self.radius + CONSTRAINT_TOL):
                raise ConfigError(name, "point lies outside the corridor tube")
        object.__setattr__(self, "entries", to_t(ent))
        object.__setattr__(self, "exits", to_t(ext))

    @property
    def points(self):
        return np.array(self.centerline)

    @property
    def num_evtols(self):
        return len(self.entries)

    @property
    def segment_lengths(self):
        return np.linalg.norm(np.diff(self.points, axis=0), axis=1)

    @property
    def length(self):
        return float(self.segment_lengths.sum())

    def project(self, q):
        """Nearest centerline points for q (..., 3): returns (points, distances, arc lengths)."""
        q = np.asarray(q, dtype=float)
        P = self.points
        a, b = P[:-1], P[1:]
        ab = b - a
        L2 = (ab**2).sum(-1)
        rel = q[..., None, :] - a
        t = np.clip((rel * ab).sum(-1) / L2, 0.0, 1.0)
        near = a + t[..., None] * ab
        d = np.linalg.norm(q[..., None, :] - near, axis=-1)
        idx = np.argmin(d, axis=-1)
        pick = lambda arr: np.take_along_axis(arr, idx[..., None], axis=-1)[..., 0]
        cum = np.concatenate([[0.0], np.cumsum(self.segment_lengths)])
        s = cum[idx] + pick(t) * self.segment_lengths[idx]
        pts = np.take_along_axis(near, idx[..., None, None], axis=-2)[..., 0, :]
        return pts, pick(d), s

    def distance(self, q):
        return self.project(q)[1]

    def _capsules(self, x):
        """Indices of the segments whose radius-r capsule contains the point ``x``."""
        P = self.points
        a, ab = P[:-1], np.diff(P, axis=0)
        t = np.clip(((x - a) * ab).sum(-1) / (ab**2).sum(-1), 0.0, 1.0)
        d = np.linalg.norm(x - (a + t[:, None] * ab), axis=1)
        return np.flatnonzero(d <= self.radius + CONSTRAINT_TOL)

    def route(self, start, goal):
        """Waypoints (ending at ``goal``) of an in-tube polyline path from ``start``.

        The tube is a union of convex capsules, one per segment, so a chord
        between two points of one capsule stays inside. The path hops through
        the bend vertices between the two capsules, each pulled 0.9 r toward
        the inside of its bend, which keeps it in both adjacent capsules.
        """
        start, goal = np.asarray(start, dtype=float), np.asarray(goal, dtype=float)
        cs, cg = self._capsules(start), self._capsules(goal)
        if len(cs) == 0 or len(cg) == 0:
            raise ValueError("route endpoints must lie inside the tube")
        k, c = min(((a, b) for a in cs for b in cg), key=lambda ab: abs(ab[0] - ab[1]))
        verts = range(k + 1, c + 1) if c > k else range(k, c, -1)
        P = self.points
        out = []
        for v in verts:
            inner = (P[v + 1] - P[v]) / np.linalg.norm(P[v + 1] - P[v]) \
                - (P[v] - P[v - 1]) / np.linalg.norm(P[v] - P[v - 1])
            n = np.linalg.norm(inner)
            out.append(P[v] + (0.9 * self.radius * inner / n if n > 1e-12 else 0.0))
        out.append(goal)
        return np.array(out)

    def route_length(self, start, goal):
        pts = np.vstack([np.asarray(start, dtype=float)[None], self.route(start, goal)])
        return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())

    def walk_route(self, start, goal, dist):
        """Point ``dist`` along :meth:`route` from ``start`` (``goal`` if the route is shorter)."""
        here = np.asarray(start, dtype=float)
        for w in self.route(start, goal):
            leg = np.linalg.norm(w - here)
            if leg >= dist:
                return here + (w - here) * (dist / leg) if leg > 0 else here
            dist -= leg
            here = w
        return here

    def point_at(self, s):
        """Centerline point at arc length ``s`` (clipped to the ends)."""
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        cum = np.concatenate([[0.0], np.cumsum(self.segment_lengths)])
        idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(cum) - 2)
        t = (s - cum[idx]) / self.segment_lengths[idx]
        P = self.points
        return P[idx] + t[..., None] * (P[idx + 1] - P[idx])

    def contain(self, q):
        """Project points outside the tube onto its boundary; also returns the outward normals."""
        q = np.asarray(q, dtype=float)
        near, d, _ = self.project(q)
        out = d > self.radius
        normal = np.zeros_like(q)
        with np.errstate(invalid="ignore", divide="ignore"):
            normal[out] = (q[out] - near[out]) / d[out][:, None]
        q2 = q.copy()
        q2[out] = near[out] + normal[out] * self.radius
        return q2, out, normal

    def sample_centerline(self, num):
        return self.point_at(np.linspace(0.0, self.length, num))


# ---------------------------------------------------------------------------
# Parameters and state


@dataclass
class CPFParams:
    k_tar: np.ndarray
    k_sep: np.ndarray
    k_com: np.ndarray
    d_sep: float = 15.0
    d_com: float = 25.0
    d_max: float = 60.0

    def __post_init__(self):
        for name in ("k_tar", "k_sep", "k_com"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=float)).copy()
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise ConfigError(f"cpf.{name}", "gains must be finite and >= 0")
            setattr(self, name, arr)
        if not (len(self.k_tar) == len(self.k_sep) == len(self.k_com)):
            raise ConfigError("cpf", "gain arrays differ in length")
        if not self.d_sep > 0:
            raise ConfigError("cpf.d_sep", "must be > 0")
        if not 0 < self.d_com <= self.d_max:
            raise ConfigError("cpf.d_com", "need 0 < d_com <= d_max")

    @classmethod
    def uniform(cls, M, k_tar, k_sep, k_com, **kw):
        return cls(np.full(M, float(k_tar)), np.full(M, float(k_sep)), np.full(M, float(k_com)), **kw)

    @classmethod
    def from_matrix(cls, gains, like):
        g = np.asarray(gains, dtype=float)
        return replace(like, k_tar=g[:, 0].copy(), k_sep=g[:, 1].copy(), k_com=g[:, 2].copy())

    @property
    def gains(self):
        """(M, 3) matrix of k_tar, k_sep, k_com."""
        return np.column_stack([self.k_tar, self.k_sep, self.k_com])

    def copy(self):
        return self.from_matrix(self.gains, self)


@dataclass(frozen=True)
class KinematicParams:
    slot_duration: float = 1.0
    max_speed: float = 20.0

    def __post_init__(self):
        if not self.slot_duration > 0:
            raise ConfigError("kinematics.slot_duration", "must be > 0")
        if not self.max_speed > 0:
            raise ConfigError("kinematics.max_speed", "must be > 0")

    @property
    def max_step(self):
        return self.max_speed * self.slot_duration


@dataclass
class FlightState:
    q: np.ndarray
    v: np.ndarray
    n: int = 0

    def copy(self):
        return FlightState(self.q.copy(), self.v.copy(), self.n)

    @classmethod
    def at_entry(cls, corridor):
        q = np.array(corridor.entries, dtype=float)
        return cls(q, np.zeros_like(q), 0)


# ---------------------------------------------------------------------------
# Potentials and forces (single eVTOL forms; the batched kernel is used in flight)


def target_potential(q_i, q_tar, k_tar):
    d = np.asarray(q_i, dtype=float) - q_tar
    return 0.5 * k_tar * float(d @ d)


def target_force(q_i, q_tar, k_tar):
    return -k_tar * (np.asarray(q_i, dtype=float) - np.asarray(q_tar, dtype=float))


def separation_potential(q_i, neighbors, k_sep, d_sep):
    total = 0.0
    for q_j in np.atleast_2d(neighbors):
        d = np.linalg.norm(np.asarray(q_i, dtype=float) - q_j)
        if d <= d_sep:
            total += 0.5 * k_sep * (d_sep / d) ** 2
    return total


def separation_force(q_i, neighbors, k_sep, d_sep):
    q_i = np.asarray(q_i, dtype=float)
    f = np.zeros(3)
    for q_j in np.atleast_2d(neighbors):
        diff = q_i - q_j
        d = np.linalg.norm(diff)
        if d == 0:
            raise ValueError("coincident positions")
        if d <= d_sep:
            f += k_sep * d_sep**2 * diff / d**4
    return f


def communication_potential(q_i, neighbors, k_com, d_com, d_max):
    total = 0.0
    for q_j in np.atleast_2d(neighbors):
        d = np.linalg.norm(np.asarray(q_i, dtype=float) - q_j)
        if d_com <= d <= d_max:
            total += 0.5 * k_com * d * d
    return total


def communication_force(q_i, neighbors, k_com, d_com, d_max):
    q_i = np.asarray(q_i, dtype=float)
    f = np.zeros(3)
    for q_j in np.atleast_2d(neighbors):
        diff = q_i - q_j
        d = np.linalg.norm(diff)
        if d == 0:
            raise ValueError("coincident positions")
        if d_com <= d <= d_max:
            f -= k_com * diff
    return f


def composite_acceleration(q, params, targets, obstacles=()):
    """Accelerations (M, 3); obstacles act as static separation sources of reach d_sep + r."""
    obs = obstacles if isinstance(obstacles, np.ndarray) else obstacle_array(obstacles)
    return kernels.cpf_accelerations(np.ascontiguousarray(q, dtype=float),
                                     np.ascontiguousarray(targets, dtype=float),
                                     np.ascontiguousarray(params.gains), float(params.d_sep),
                                     float(params.d_com), float(params.d_max),
                                     np.ascontiguousarray(obs, dtype=float))


def total_potential(q, params, targets, obstacles=()):
    """Potential whose negative gradient in q[i] is eVTOL i's acceleration (per-eVTOL gains)."""
    q = np.asarray(q, dtype=float)
    M = len(q)
    out = np.zeros(M)
    for i in range(M):
        others = np.delete(q, i, axis=0)
        out[i] = target_potential(q[i], targets[i], params.k_tar[i])
        if M > 1:
            out[i] += separation_potential(q[i], others, params.k_sep[i], params.d_sep)
            out[i] += communication_potential(q[i], others, params.k_com[i], params.d_com, params.d_max)
        for o in obstacles:
            out[i] += separation_potential(q[i], np.array(o.center), params.k_sep[i],
                                           params.d_sep + o.radius)
    return out


# ---------------------------------------------------------------------------
# Targets, integration, metrics


def moving_targets(corridor, n, kin, lookahead=None):
    """Waypoint per eVTOL for slot ``n``.

    The waypoint starts ``lookahead`` ahead of the eVTOL's entry (measured
    along the centerline) and advances at cruise speed V_max; once it reaches
    the arc position of the eVTOL's exit it becomes the exit itself.
    """
    look = 2 * kin.max_step if lookahead is None else lookahead
    s_entry, s_exit = _entry_exit_arcs(corridor)
    ahead = s_entry + look + n * kin.max_step
    pts = corridor.point_at(np.minimum(ahead, s_exit))
    exits = np.array(corridor.exits)
    done = ahead >= s_exit
    pts[done] = exits[done]
    return pts


def _entry_exit_arcs(corridor):
    arcs = corridor.__dict__.get("_arcs")
    if arcs is None:
        arcs = (corridor.project(np.array(corridor.entries))[2],
                corridor.project(np.array(corridor.exits))[2])
        object.__setattr__(corridor, "_arcs", arcs)
    return arcs


def step_kinematics(state, acc, kin, corridor):
    """Semi-implicit Euler with a speed clamp, then tube projection."""
    dt = kin.slot_duration
    v = state.v + acc * dt
    speed = np.linalg.norm(v, axis=1)
    over = speed > kin.max_speed
    v[over] *= (kin.max_speed / speed[over])[:, None]
    q = state.q + v * dt
    q, out, normal = corridor.contain(q)
    if np.any(out):
        radial = (v[out] * normal[out]).sum(-1)
        v[out] -= np.maximum(radial, 0.0)[:, None] * normal[out]
    # projection can lengthen a step near bends; clamp again, then repair any chord
    # that cut the inside of a bend and left the (non-convex) tube
    q = _clamp_step(state.q, q, kin.max_step)
    q = _restore_containment(state.q, q, kin.max_step, corridor)
    return FlightState(q, v, state.n + 1)


def _restore_containment(q_prev, q, max_step, corridor, rounds=10):
    inside = lambda x: corridor.distance(x) <= corridor.radius + 0.5 * CONSTRAINT_TOL
    bad = ~inside(q)
    if not np.any(bad):
        return q
    q = q.copy()
    for _ in range(rounds):
        q[bad] = _clamp_step(q_prev[bad], corridor.contain(q[bad])[0], max_step)
        bad = ~inside(q)
        if not np.any(bad):
            return q
    # fall back to the furthest inside point found by bisection along the chord
    for i in np.flatnonzero(bad):
        lo, hi = 0.0, 1.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if inside(q_prev[i] + mid * (q[i] - q_prev[i])):
                lo = mid
            else:
                hi = mid
        q[i] = q_prev[i] + lo * (q[i] - q_prev[i])
    return q


def _clamp_step(q_prev, q_new, max_step):
    d = q_new - q_prev
    n = np.linalg.norm(d, axis=1)
    over = n > max_step
    if np.any(over):
        q_new = q_new.copy()
        q_new[over] = q_prev[over] + d[over] * (max_step / n[over])[:, None] * (1 - 1e-12)
    return q_new


def endpoint_guard(prev, nxt, corridor, kin, slots_left):
    """Park eVTOLs within one step of their exit and keep every exit reachable in time.

    ``slots_left`` counts the slots remaining after ``nxt``. Reachability is
    measured along :meth:`Corridor.route`, and a late eVTOL is moved along that
    route so it stays inside the tube.
    """
    exits = np.array(corridor.exits)
    q, v = nxt.q.copy(), nxt.v.copy()
    step = kin.max_step
    near = np.linalg.norm(exits - prev.q, axis=1) <= step
    q[near], v[near] = exits[near], 0.0
    for i in np.flatnonzero(~near):
        if corridor.route_length(q[i], exits[i]) <= slots_left * step + CONSTRAINT_TOL:
            continue
        q[i] = corridor.walk_route(prev.q[i], exits[i], step)
        d = q[i] - prev.q[i]
        v[i] = d / kin.slot_duration
    return FlightState(q, v, nxt.n)


@dataclass
class Rollout:
    positions: np.ndarray        # (N+1, M, 3)
    velocities: np.ndarray       # (N+1, M, 3)
    targets: np.ndarray          # (N, M, 3) target used for each step


def rollout(corridor, params, kin, num_slots, obstacles=(), state=None, noise=0.0, rng=None,
            gains_schedule=None):
    """Fly from ``state`` (default: the entries) to slot ``num_slots``.

    Returns positions for slots state.n .. num_slots. ``gains_schedule`` may
    give a CPFParams per step. With ``noise`` > 0 a Gaussian position
    perturbation is applied after each step, shrunk if needed so the speed and
    corridor constraints still hold.
    """
    st = FlightState.at_entry(corridor) if state is None else state.copy()
    obs = obstacle_array(obstacles) if not isinstance(obstacles, np.ndarray) else obstacles
    Q, V, T = [st.q.copy()], [st.v.copy()], []
    while st.n < num_slots:
        p = params if gains_schedule is None else gains_schedule(st.n)
        st = advance(st, corridor, p, kin, num_slots, obs, noise, rng, T)
        Q.append(st.q.copy())
        V.append(st.v.copy())
    T = np.array(T) if T else np.zeros((0,) + st.q.shape)
    return Rollout(np.array(Q), np.array(V), T)


def advance(st, corridor, params, kin, num_slots, obs, noise=0.0, rng=None, target_log=None):
    """One constrained slot of CPF flight."""
    tgt = moving_targets(corridor, st.n, kin)
    if target_log is not None:
        target_log.append(tgt)
    acc = composite_acceleration(st.q, params, tgt, obs)
    nxt = step_kinematics(st, acc, kin, corridor)
    if noise > 0:
        nxt = _perturb(st, nxt, corridor, kin, noise, rng)
    return endpoint_guard(st, nxt, corridor, kin, num_slots - nxt.n)


def _perturb(prev, nxt, corridor, kin, sigma, rng):
    q = nxt.q.copy()
    for i in range(len(q)):
        e = rng.normal(0.0, sigma, 3)
        for _ in range(20):
            cand = q[i] + e
            if (np.linalg.norm(cand - prev.q[i]) <= kin.max_step
                    and corridor.distance(cand) <= corridor.radius):
                q[i] = cand
                break
            e *= 0.5
    return FlightState(q, nxt.v, nxt.n)


def centerline_deviation(trajectory, corridor):
    """Mean distance to the centerline over all slots and eVTOLs."""
    traj = np.asarray(trajectory, dtype=float)
    if traj.size == 0:
        raise ValueError("empty trajectory")
    return float(corridor.distance(traj.reshape(-1, 3)).mean())


def collision_penalty(positions, c1=0.0, c2=-0.05):
    """Per-eVTOL proximity penalty S_m = sum_k (1 - exp(c1 + c2 d_km)) / M."""
    q = np.asarray(positions, dtype=float)
    M = len(q)
    d = np.linalg.norm(q[:, None] - q[None], axis=-1)
    terms = np.where(~np.eye(M, dtype=bool), 1.0 - np.exp(c1 + c2 * d), 0.0)
    return terms.sum(1) / M


def min_pairwise_separation(trajectory):
    traj = np.asarray(trajectory, dtype=float)
    M = traj.shape[-2]
    if M < 2:
        return float("inf")
    d = np.linalg.norm(traj[..., :, None, :] - traj[..., None, :, :], axis=-1)
    iu = np.triu_indices(M, 1)
    return float(d[..., iu[0], iu[1]].min())


def obstacle_clearance(trajectory, obstacles):
    """Smallest (distance to centre - radius) over all positions; +inf without obstacles."""
    if not obstacles:
        return float("inf")
    pts = np.asarray(trajectory, dtype=float).reshape(-1, 3)
    arr = obstacle_array(obstacles)
    d = np.linalg.norm(pts[:, None] - arr[None, :, :3], axis=-1) - arr[None, :, 3]
    return float(d.min())


def constraint_violations(trajectory, corridor, kin):
    """Counts of C4 (speed), C5 (containment) and C6 (endpoint) breaches."""
    traj = np.asarray(trajectory, dtype=float)
    steps = np.linalg.norm(np.diff(traj, axis=0), axis=-1)
    c4 = int((steps > kin.max_step + CONSTRAINT_TOL).sum())
    c5 = int((corridor.distance(traj) > corridor.radius + CONSTRAINT_TOL).sum())
    c6 = int(np.any(traj[0] != np.array(corridor.entries))) + int(np.any(traj[-1] != np.array(corridor.exits)))
    return {"C4": c4, "C5": c5, "C6": c6}
