"""Acceptance suite: one PASS/FAIL line per criterion, printed as the tests run.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines inline; they
are also printed through the terminal writer without ``-s``.
"""
import filecmp
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from simdt import cli
from simdt.channel import SimContext
from simdt.flight import CPFParams, Obstacle, composite_acceleration, total_potential
from simdt.orchestrator import bcd_communication, initial_trajectory, run, train_cpf
from simdt.phase import random_phases
from simdt.power import kkt_residual, optimal_auxiliaries, prox_linear, solve_power_kkt, sum_rate
from simdt.power import surrogate_dual, surrogate_quadratic
from simdt.scenario import Scenario

from test_dqn import test_backprop_matches_finite_difference as backprop_check
from test_phase import CONFIGS, fd_gradient_errors, make_ctx
from test_power import BUDGET, SIGMA2, grid_optimum, random_gains

pytestmark = pytest.mark.acceptance

SEED = 7
RUNS = {}          # every end-to-end report produced here, for the constraint audit


def verdict(request, number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    tw = request.config.pluginmanager.get_plugin("terminalreporter")
    if tw is not None:
        tw.write_line("")
        tw.write_line(line)
    else:  # pragma: no cover
        print(line)
    return ok


# ---------------------------------------------------------------------------
# shared end-to-end runs


@pytest.fixture(scope="module")
def sync_runs():
    scn = Scenario(seed=SEED).with_obstacles(3)
    out = {}
    for k in (0, 2, 4):
        out[k] = run(scn, replace(scn.loop, sync_count=k))
        RUNS[f"3 obstacles, {k} syncs"] = out[k]
    return out


@pytest.fixture(scope="module")
def five_obstacle_run():
    scn = Scenario(seed=SEED).with_obstacles(5)
    rep = run(scn, replace(scn.loop, sync_count=2))
    RUNS["5 obstacles, 2 syncs"] = rep
    return scn, rep


# ---------------------------------------------------------------------------


def test_1_ablation_ordering(request):
    t = time.time()
    scn = Scenario(seed=SEED)
    traj = initial_trajectory(scn.corridor, scn.num_slots)
    ctx = SimContext.build(scn.geometry, scn.channel, scn.station, traj[1:])
    rates = {}
    for mode in ("joint", "phase-only", "power-only"):
        rates[mode] = bcd_communication(ctx, cli._rng(scn), mode, cfg=scn.loop).total_rate
    elapsed = time.time() - t
    j, ph, pw = rates["joint"], rates["phase-only"], rates["power-only"]
    ok = j > ph > pw and j / ph >= 1.2 and pw <= 0.1 * j and elapsed <= 60
    verdict(request, 1, ok, f"joint {j:.3f} > phase-only {ph:.3f} > power-only {pw:.3f} nats; "
                            f"joint/phase {j / ph:.2f}, power/joint {pw / j:.3f}; {elapsed:.1f} s")
    assert ok


def test_2_gradient_suites(request):
    t = time.time()
    phase = []
    for i, (L, K, M) in enumerate(CONFIGS):
        rng = np.random.default_rng(100 + i)
        ctx = make_ctx(rng, L, K, M)
        theta = random_phases(rng, (2, L, K))
        p = rng.dirichlet(np.ones(M), 2) * BUDGET
        phase.extend(fd_gradient_errors(ctx, theta, p, rng, 25))

    rng = np.random.default_rng(200)
    obs = (Obstacle((50.0, 0.0, 0.0), 20.0),)
    force = 0.0
    for _ in range(60):
        q = rng.uniform(-20, 20, (4, 3))
        tg = rng.uniform(-50, 50, (4, 3))
        prm = CPFParams(rng.uniform(0, 1, 4), rng.uniform(0, 30, 4), rng.uniform(0, 1, 4))
        d = np.linalg.norm(q[:, None] - q[None], axis=-1)
        if np.any(np.abs(d - prm.d_sep) < 1e-3) or np.any(np.abs(d - prm.d_com) < 1e-3) \
                or np.any(np.abs(d - prm.d_max) < 1e-3):
            continue
        a = composite_acceleration(q, prm, tg, obs)
        for i in range(4):
            fd = np.zeros(3)
            for c in range(3):
                e = np.zeros_like(q)
                e[i, c] = 1e-4
                fd[c] = -(total_potential(q + e, prm, tg, obs)[i]
                          - total_potential(q - e, prm, tg, obs)[i]) / 2e-4
            force = max(force, np.linalg.norm(fd - a[i]) / np.linalg.norm(a[i]))

    backprop_ok = True
    try:
        backprop_check()
    except AssertionError:
        backprop_ok = False
    elapsed = time.time() - t
    ok = len(phase) >= 100 and max(phase) < 1e-5 and force < 1e-6 and backprop_ok and elapsed <= 30
    verdict(request, 2, ok, f"phase max rel err {max(phase):.2e} over {len(phase)} coords; "
                            f"force {force:.2e}; backprop {'ok' if backprop_ok else 'bad'} (<1e-4); "
                            f"{elapsed:.1f} s")
    assert ok


def test_3_power_correctness(request):
    t = time.time()
    rng = np.random.default_rng(300)
    gap, ident, kkt = np.inf, 0.0, 0.0
    for _ in range(20):
        g = random_gains(rng, 1, 2)
        res = prox_linear(g, BUDGET, SIGMA2)
        gap = min(gap, sum_rate(g, res.p, SIGMA2) - grid_optimum(g))
        mu, y = optimal_auxiliaries(g, res.p, SIGMA2)
        ga = sum_rate(g, res.p, SIGMA2)
        ident = max(ident, abs(surrogate_dual(g, res.p, mu, SIGMA2) - ga),
                    abs(surrogate_quadratic(g, res.p, mu, y, SIGMA2) - ga))
        p, beta = solve_power_kkt(g, mu, y, BUDGET)
        r = kkt_residual(g, p, mu, y, beta)
        kkt = max(kkt, float(np.max(np.abs(r[p > 0]), initial=0.0)))
    elapsed = time.time() - t
    ok = gap >= -1e-3 and ident < 1e-9 and kkt < 1e-6 and elapsed <= 60
    verdict(request, 3, ok, f"worst (rate - grid) {gap:+.2e}; surrogate gap {ident:.1e}; "
                            f"KKT residual {kkt:.1e}; {elapsed:.1f} s")
    assert ok


@pytest.mark.slow
def test_5_dqn_convergence(request):
    t = time.time()
    ded = train_cpf(Scenario(seed=SEED))
    trace = np.array(ded.deviation_trace)
    elapsed = time.time() - t
    first, last = trace[:10].mean(), trace[-100:].mean()
    ok = len(trace) == 500 and last < 0.5 * first and elapsed <= 600
    verdict(request, 5, ok, f"first-10 mean {first:.2f} m, last-100 mean {last:.2f} m, "
                            f"ratio {last / first:.3f}; {elapsed:.0f} s")
    assert ok


@pytest.mark.slow
def test_6_geometry_sweep(request):
    scn = Scenario(seed=SEED)
    base = scn.geometry.thickness
    layers = cli.sweep_geometry(scn, [3, 5, 7], [4], [base])
    atoms = cli.sweep_geometry(scn, [scn.geometry.num_layers], [4, 9, 16], [base])
    spacing = cli.sweep_geometry(scn, [3], [4], spacing=[0.01, 0.05])
    rl = [r[-1] for r in layers]
    rk = [r[-1] for r in atoms]
    rs = [r[-1] for r in spacing]
    a = all(y - x > 1e-6 for x, y in zip(rl, rl[1:]))
    b = all(y - x > 1e-6 for x, y in zip(rk, rk[1:]))
    c = rs[0] - rs[1] > 1e-6
    ok = a and b and c
    fmt = lambda v: " < ".join(f"{x:.2f}" for x in v)
    verdict(request, 6, ok, f"(a) L=3,5,7: {fmt(rl)}; (b) K=4,9,16: {fmt(rk)}; "
                            f"(c) spacing 0.01 vs 0.05: {rs[0]:.2f} vs {rs[1]:.2f} nats")
    assert ok


@pytest.mark.slow
def test_7_sync_benefit(request, sync_runs):
    dev = {k: r.mean_deviation for k, r in sync_runs.items()}
    rate = {k: r.total_rate for k, r in sync_runs.items()}
    dev_ok = dev[4] < dev[2] < dev[0]
    rate_ok = rate[4] >= rate[0]
    ok = dev_ok and rate_ok
    verdict(request, 7, ok,
            f"deviation 4/2/0 syncs {dev[4]:.3f} < {dev[2]:.3f} < {dev[0]:.3f} m "
            f"({'holds' if dev_ok else 'violated'}); rate 4 vs 0 syncs {rate[4]:.4f} vs "
            f"{rate[0]:.4f} nats ({'holds' if rate_ok else 'violated'}); "
            f"deltas {100 * (1 - dev[4] / dev[0]):.1f}% deviation, "
            f"{100 * (rate[4] / rate[0] - 1):+.4f}% rate")
    assert ok


@pytest.mark.slow
def test_8_obstacle_safety(request, five_obstacle_run):
    scn, rep = five_obstacle_run
    floor = 0.25 * scn.cpf.d_sep
    ok = rep.obstacle_clearance > 0 and rep.min_separation > floor
    verdict(request, 8, ok, f"min obstacle clearance {rep.obstacle_clearance:.2f} m (> 0); "
                            f"min separation {rep.min_separation:.2f} m (> {floor:.2f})")
    assert ok


@pytest.mark.slow
def test_4_constraint_conservation(request, sync_runs, five_obstacle_run):
    # runs after 7 and 8 so every end-to-end report is audited
    bad = {name: v for name, rep in RUNS.items() for v in [rep.violations] if any(v.values())}
    checked = sorted(RUNS)
    ok = not bad and len(checked) == 4
    verdict(request, 4, ok, f"C1-C6 violations: {bad or 'none'} across {len(checked)} runs")
    assert ok


SCENARIO = """num_evtols: 2
num_slots: 24
geometry: {num_layers: 3, atoms_per_layer: 4}
dqn: {episodes: 4, batch_size: 8, buffer_capacity: 200, hidden: [16, 16]}
loop: {outer_rounds: 1, bcd_max_rounds: 4, phase_max_iters: 60, deduce_episodes: 3}
"""

COMMANDS = [
    ["optimize-sim"], ["optimize-sim", "--power-only"], ["baseline-mimo"],
    ["sweep-geometry", "--layers", "1,2", "--spacing", "0.01"], ["train-cpf"],
    ["run-dt", "--sync-count", "2", "--obstacles", "2"],
]


@pytest.mark.slow
def test_9_cli_determinism(request, tmp_path):
    path = tmp_path / "scn.yaml"
    path.write_text(SCENARIO)
    mismatched = []
    for fmt_name in ("csv", "json"):
        for i, cmd in enumerate(COMMANDS):
            dirs = []
            for rep in range(2):
                out = tmp_path / f"{fmt_name}{i}_{rep}"
                code = cli.main(cmd + ["--scenario", str(path), "--seed", str(SEED), "--out", str(out),
                                       "--format", fmt_name])
                assert code == 0, cmd
                dirs.append(out)
            names = sorted(os.listdir(dirs[0]))
            assert names == sorted(os.listdir(dirs[1]))
            _, diff, err = filecmp.cmpfiles(dirs[0], dirs[1], names, shallow=False)
            if diff or err:
                mismatched.append((" ".join(cmd), fmt_name, diff + err))
    ok = not mismatched
    verdict(request, 9, ok, f"{2 * len(COMMANDS)} subcommand/format pairs run twice; "
                            f"mismatches: {mismatched or 'none'}")
    assert ok
