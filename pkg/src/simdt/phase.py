"""SIM phase optimization: analytic gradient plus Armijo-backtracked ascent."""
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .channel import sim_cross_gains, rates_from_cross_gains

TWO_PI = 2 * np.pi
STEP_FLOOR = 2.0**-30


def wrap_phases(theta):
    """Map phases into [0, 2pi); guards the float edge where x % 2pi == 2pi."""
    t = np.mod(theta, TWO_PI)
    return np.where(t >= TWO_PI, 0.0, t)


def objective(ctx, theta, p):
    """g_b: total SIM rate for phases ``theta`` (N, L, K) and powers ``p`` (N, M)."""
    return float(rates_from_cross_gains(sim_cross_gains(ctx.gains(theta)), p, ctx.sigma2).sum())


def partial_derivative(ctx, theta, p):
    """d g_b / d theta, shape (N, L, K)."""
    return kernels.phase_gradient(np.ascontiguousarray(theta, dtype=float), ctx.W, ctx.feeds,
                                  ctx.h, np.ascontiguousarray(p, dtype=float), float(ctx.sigma2))


def armijo_step(fun, theta, grad, f=1e-3, shrink=0.5, value=None, floor=STEP_FLOOR):
    """Largest step in {1, shrink, shrink^2, ...} passing the sufficient-increase test.

    ``fun`` maps phases to the objective. Returns 0.0 if the step falls below
    ``floor`` without passing.
    """
    base = fun(theta) if value is None else value
    sq = float((grad**2).sum())
    count = 1.0
    while count >= floor:
        if fun(theta + count * grad) >= base + f * count * sq:
            return count
        count *= shrink
    return 0.0


@dataclass
class AscentResult:
    theta: np.ndarray
    trace: list = field(default_factory=list)
    iterations: int = 0
    stalled: bool = False


def gradient_ascent(ctx, theta0, p, tol=1e-4, max_iters=500, f=1e-3, shrink=0.5):
    """Ascend g_b from ``theta0`` until the per-iteration gain drops below ``tol``.

    One step is always attempted before the stopping test is applied.
    """
    theta = wrap_phases(np.array(theta0, dtype=float))
    p = np.asarray(p, dtype=float)
    fun = lambda t: objective(ctx, t, p)
    val = fun(theta)
    trace = [val]
    res = AscentResult(theta=theta, trace=trace)
    for it in range(max_iters):
        grad = partial_derivative(ctx, theta, p)
        if not np.any(grad):
            break
        count = armijo_step(fun, theta, grad, f=f, shrink=shrink, value=val)
        res.iterations = it + 1
        if count == 0.0:
            res.stalled = True
            break
        cand = wrap_phases(theta + count * grad)
        new = fun(cand)
        if new < val:  # wrapping can shift the last bits; never accept a loss
            res.stalled = True
            break
        theta, gain, val = cand, new - val, new
        trace.append(val)
        if gain < tol:
            break
    res.theta = theta
    return res


def random_phases(rng, shape):
    return rng.uniform(0.0, TWO_PI, size=shape)
