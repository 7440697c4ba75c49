"""Time the numba and numpy variants of each hot kernel on default-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from simdt import kernels
from simdt.channel import SimContext
from simdt.orchestrator import initial_trajectory
from simdt.scenario import Scenario, OBSTACLE_PRESET
from simdt.flight import moving_targets, obstacle_array


def inputs(seed=0):
    scn = Scenario()
    rng = np.random.default_rng(seed)
    traj = initial_trajectory(scn.corridor, scn.num_slots)
    ctx = SimContext.build(scn.geometry, scn.channel, scn.station, traj[1:])
    N, M = ctx.num_slots, scn.num_evtols
    theta = rng.uniform(0, 2 * np.pi, (N, scn.geometry.num_layers, scn.geometry.atoms_per_layer))
    p = np.full((N, M), scn.station.total_power / M)
    q = traj[5]
    tgt = moving_targets(scn.corridor, 5, scn.kinematics)
    obs = obstacle_array(OBSTACLE_PRESET)
    c = scn.cpf
    return {
        "cascade_response": lambda k: k(theta, ctx.W, ctx.feeds, ctx.h),
        "phase_gradient": lambda k: k(theta, ctx.W, ctx.feeds, ctx.h, p, ctx.sigma2),
        "cpf_accelerations": lambda k: k(q, tgt, c.gains, c.d_sep, c.d_com, c.d_max, obs),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    print(f"{'kernel':<20}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, call in inputs().items():
        fast = getattr(kernels, f"{name}_numba")
        slow = getattr(kernels, f"{name}_numpy")
        call(fast)  # compile outside the timing
        t_np = min(timeit.repeat(lambda: call(slow), number=10, repeat=args.repeat)) / 10
        t_nb = min(timeit.repeat(lambda: call(fast), number=10, repeat=args.repeat)) / 10
        print(f"{name:<20}{t_np * 1e6:>12.1f}{t_nb * 1e6:>12.1f}{t_np / t_nb:>10.1f}")


if __name__ == "__main__":
    main()
