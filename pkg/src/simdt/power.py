"""Power allocation by the quadratic-transform fractional-programming scheme.

All routines take cross gains ``g`` of shape (N, M, M): g[n, m, m'] is the gain
seen by receiver m from the stream intended for m'. The SIM link has identical
rows (see :func:`simdt.channel.sim_cross_gains`).
"""
from dataclasses import dataclass, field
import logging

import numpy as np

from .channel import rates_from_cross_gains, sinr_from_cross_gains
from .errors import InfeasibleSlotError

log = logging.getLogger(__name__)

BAND_LOW = 0.9
BETA_START = 1e-6
LINEAR_STEPS = 100
MAX_DOUBLINGS = 400


def _own(g):
    return np.diagonal(g, axis1=-2, axis2=-1)


def _denominators(g, p, sigma2):
    return (g * p[..., None, :]).sum(-1) + sigma2


def sum_rate(g, p, sigma2):
    """g_a: total rate over all slots and users."""
    return float(rates_from_cross_gains(g, p, sigma2).sum())


def surrogate_dual(g, p, mu, sigma2):
    """g_a1: Lagrangian-dual transform of the sum rate."""
    own = _own(g) * p
    return float((np.log1p(mu) - mu + (1 + mu) * own / _denominators(g, p, sigma2)).sum())


def surrogate_quadratic(g, p, mu, y, sigma2):
    """g_a2: quadratic transform of :func:`surrogate_dual`."""
    own = _own(g) * p
    return float((np.log1p(mu) - mu + 2 * y * np.sqrt((1 + mu) * own)
                  - y**2 * _denominators(g, p, sigma2)).sum())


def update_mu(g, p, y):
    """Stationary point of g_a2 in mu for fixed y and p."""
    s = _own(g) * np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    return 0.5 * y**2 * s + 0.5 * y * np.sqrt(s * (y**2 * s + 4.0))


def update_y(g, p, mu, sigma2):
    """Stationary point of g_a2 in y for fixed mu and p."""
    p = np.asarray(p, dtype=float)
    return np.sqrt((1 + mu) * _own(g) * p) / _denominators(g, p, sigma2)


def optimal_auxiliaries(g, p, sigma2):
    """Joint maximiser of g_a2 over (mu, y): mu = SINR, y from :func:`update_y`."""
    mu = sinr_from_cross_gains(g, p, sigma2)
    return mu, update_y(g, p, mu, sigma2)


def kkt_residual(g, p, mu, y, beta):
    """d g_a2 / d p_m - beta[n]; zero at every returned p_m > 0."""
    num = y * np.sqrt((1 + mu) * _own(g))
    den = (y[..., :, None] ** 2 * g).sum(-2)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = num / np.sqrt(p) - den - np.asarray(beta)[..., None]
    return np.where(p > 0, r, 0.0)


def _slot_powers(num, den, beta):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(num > 0, (num / (den + beta)) ** 2, 0.0)


def _solve_slot(num, den, budget, slot):
    """Return (p, beta) for one slot."""
    # den + beta <= 0 with num > 0 has no finite power; such beta is infeasible
    def total(beta):
        if np.any((num > 0) & (den + beta <= 0)):
            return np.inf
        return _slot_powers(num, den, beta).sum()

    if total(0.0) <= budget:
        return _slot_powers(num, den, 0.0), 0.0

    # exponential increase
    lo, hi = 0.0, BETA_START
    for _ in range(MAX_DOUBLINGS):
        if total(hi) <= budget:
            break
        lo, hi = hi, hi * 2.0
    else:
        raise InfeasibleSlotError(slot)

    # linear decrease from the feasible end back toward the infeasible one
    step = (hi - lo) / LINEAR_STEPS
    feas, infeas = hi, lo
    for i in range(1, LINEAR_STEPS):
        beta = hi - i * step
        if total(beta) <= budget:
            feas = beta
        else:
            infeas = beta
            break

    # bisection refinement toward the smallest feasible beta (sum p -> budget)
    for _ in range(200):
        mid = 0.5 * (feas + infeas)
        if mid in (feas, infeas):
            break
        if total(mid) <= budget:
            feas = mid
        else:
            infeas = mid
        if budget - total(feas) <= 1e-13 * budget:
            break
    p = _slot_powers(num, den, feas)
    s = p.sum()
    if s < BAND_LOW * budget:
        log.debug("slot %d: power %.4g below the 0.9 band after search", slot, s)
    return p, feas


def solve_power_kkt(g, mu, y, total_power):
    """Closed-form powers with the per-slot dual chosen by search.

    Returns (p, beta) with p of shape (N, M) and beta of shape (N,).
    Users with zero own gain get p = 0.
    """
    g = np.asarray(g, dtype=float)
    num = y * np.sqrt((1 + mu) * _own(g))
    den = (y[..., :, None] ** 2 * g).sum(-2)
    N = g.shape[0]
    p = np.zeros(num.shape)
    beta = np.zeros(N)
    for n in range(N):
        p[n], beta[n] = _solve_slot(num[n], den[n], total_power, n)
    return p, beta


@dataclass
class PowerResult:
    p: np.ndarray
    beta: np.ndarray
    objective: list = field(default_factory=list)
    mu: np.ndarray = None
    y: np.ndarray = None


def prox_linear(g, total_power, sigma2, max_iters=20, p0=None, y0=None,
                scale_to_budget=True):
    """Alternate mu -> y -> power updates for ``max_iters`` rounds.

    ``p0`` defaults to the uniform split. ``y0`` defaults to the quadratic
    auxiliary that makes the surrogate tight at ``p0``. Each round refreshes
    (mu, y) to the joint maximiser of the surrogate at the current powers
    before the power solve, so the recorded sum rate never decreases.

    With ``scale_to_budget`` a slot whose powers sum below the budget is scaled
    up to it. Every SINR rises under a common scale factor, so this only helps;
    it removes the slow creep toward full power at high SNR.
    """
    g = np.asarray(g, dtype=float)
    N, M, _ = g.shape
    p = np.full((N, M), total_power / M) if p0 is None else np.array(p0, dtype=float)
    if np.any(p < 0) or np.any(p.sum(-1) > total_power * (1 + 1e-12)):
        raise ValueError("initial powers are infeasible")
    mu, y_tight = optimal_auxiliaries(g, p, sigma2)
    y = y_tight if y0 is None else np.array(y0, dtype=float)
    trace = [sum_rate(g, p, sigma2)]
    beta = np.zeros(N)
    for it in range(max_iters):
        mu = update_mu(g, p, y)
        y = update_y(g, p, mu, sigma2)
        mu, y = _tighten(g, p, mu, y, sigma2)
        p, beta = solve_power_kkt(g, mu, y, total_power)
        if scale_to_budget:
            p = _scale_to_budget(p, total_power)
        trace.append(sum_rate(g, p, sigma2))
    return PowerResult(p=p, beta=beta, objective=trace, mu=mu, y=y)


def _tighten(g, p, mu, y, sigma2, tol=1e-13, max_rounds=200):
    # repeat the two closed-form updates until they reach their joint fixed point
    for _ in range(max_rounds):
        mu_new = update_mu(g, p, y)
        y_new = update_y(g, p, mu_new, sigma2)
        done = np.allclose(mu_new, mu, rtol=tol, atol=0) and np.allclose(y_new, y, rtol=tol, atol=0)
        mu, y = mu_new, y_new
        if done:
            break
    return mu, y


def _scale_to_budget(p, budget):
    s = p.sum(-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(s > 0, budget / s, 1.0)
    # never exceed the budget through rounding
    out = p * np.maximum(f, 1.0)
    over = out.sum(-1, keepdims=True) > budget
    return np.where(over, out * (budget / out.sum(-1, keepdims=True)) * (1 - 1e-15), out)
