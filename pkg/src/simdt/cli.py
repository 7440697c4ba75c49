"""Command line entry point: one subcommand per experiment, exports to --out."""
import argparse
from dataclasses import replace
import logging
import sys

import numpy as np

from .channel import SimContext, mimo_cross_gains, rates_from_cross_gains, sim_cross_gains
from .errors import ConfigError
from .orchestrator import RunAborted, bcd_communication, initial_trajectory, run, train_cpf
from .power import prox_linear
from .report import export_report, export_tables
from .scenario import Scenario, load_scenario

log = logging.getLogger("simdt")


def _common(parser, suppress):
    """Global flags; subparsers get SUPPRESS defaults so either position works."""
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=d(None), help="master seed (overrides the scenario)")
    parser.add_argument("--scenario", default=d(None), help="YAML scenario file (default: built-in)")
    parser.add_argument("--out", default=d("out"), help="output directory")
    parser.add_argument("--format", choices=("csv", "json"), default=d("csv"))
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser():
    parser = argparse.ArgumentParser(prog="simdt", description=__doc__)
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("optimize-sim", help="power/phase BCD on the centerline trajectory")
    _common(p, suppress=True)
    abl = p.add_mutually_exclusive_group()
    abl.add_argument("--power-only", action="store_true", help="freeze phases at zero")
    abl.add_argument("--phase-only", action="store_true", help="freeze the uniform power split")

    p = sub.add_parser("baseline-mimo", help="SIM vs plain multi-antenna rate per slot")
    _common(p, suppress=True)

    p = sub.add_parser("sweep-geometry", help="total rate over (layers, atoms, thickness) tuples")
    _common(p, suppress=True)
    p.add_argument("--layers", type=_int_list, default=[1, 2, 3, 4, 5])
    p.add_argument("--atoms", type=_int_list, default=[4])
    thick = p.add_mutually_exclusive_group()
    thick.add_argument("--thickness", type=_float_list, help="total stack thickness in metres")
    thick.add_argument("--spacing", type=_float_list, help="layer spacing in metres (thickness = layers * spacing)")

    p = sub.add_parser("train-cpf", help="DQN gain tuning; emits the deviation trace")
    _common(p, suppress=True)
    p.add_argument("--no-comm-reward", action="store_true", help="drop the rate term from the reward")

    p = sub.add_parser("run-dt", help="full twin loop with a physical flight")
    _common(p, suppress=True)
    p.add_argument("--sync-count", type=int, default=None, help="syncs during the flight")
    p.add_argument("--no-comm-reward", action="store_true", help="drop the rate term from the reward")
    p.add_argument("--obstacles", type=int, default=None, metavar="K",
                   help="enable the first K preset obstacles")
    return parser


def _scenario(args):
    scn = load_scenario(args.scenario) if args.scenario else Scenario()
    if args.seed is not None:
        scn = replace(scn, seed=args.seed)
    return scn


def _rng(scn):
    return np.random.default_rng(np.random.SeedSequence(scn.seed).spawn(2)[0])


def _bcd(scn, mode):
    traj = initial_trajectory(scn.corridor, scn.num_slots)
    ctx = SimContext.build(scn.geometry, scn.channel, scn.station, traj[1:])
    return traj, ctx, bcd_communication(ctx, _rng(scn), mode, cfg=scn.loop)


def cmd_optimize_sim(args, scn):
    mode = "power-only" if args.power_only else "phase-only" if args.phase_only else "joint"
    _, ctx, res = _bcd(scn, mode)
    rates = ctx.rates(res.theta, res.p)
    N, M = rates.shape
    tables = {
        "rates": (("slot", "evtol", "rate_nats"),
                  [(n + 1, m, rates[n, m]) for n in range(N) for m in range(M)]),
        "power": (("slot", "evtol", "power_mw"),
                  [(n + 1, m, res.p[n, m]) for n in range(N) for m in range(M)]),
        "trace": (("round", "total_rate_nats"), list(enumerate(res.trace))),
    }
    metrics = {"mode": mode, "total_rate_nats": float(rates.sum()), "bcd_rounds": len(res.trace) - 1,
               "stalled": res.stalled}
    return tables, metrics


def cmd_baseline_mimo(args, scn):
    traj, ctx, res = _bcd(scn, "joint")
    sim = ctx.rates(res.theta, res.p).sum(1)
    g = mimo_cross_gains(traj[1:], scn.station, scn.channel)
    p = prox_linear(g, scn.station.total_power, scn.channel.noise_power, scn.loop.power_iters).p
    mimo = rates_from_cross_gains(g, p, scn.channel.noise_power).sum(1)
    rows = [(n + 1, sim[n], mimo[n]) for n in range(len(sim))]
    metrics = {"sim_total_rate_nats": float(sim.sum()), "mimo_total_rate_nats": float(mimo.sum())}
    return {"rates": (("slot", "sim_rate_nats", "mimo_rate_nats"), rows)}, metrics


def sweep_geometry(scn, layers, atoms, thickness=None, spacing=None):
    """Joint-BCD total rate for every (layers, atoms, thickness) combination."""
    rows = []
    for L in layers:
        for K in atoms:
            if spacing is not None:
                thick = [L * s for s in spacing]
            elif thickness is not None:
                thick = thickness
            else:
                thick = [scn.geometry.thickness]
            for T in thick:
                geo = replace(scn.geometry, num_layers=L, atoms_per_layer=K, thickness=T)
                _, _, res = _bcd(replace(scn, geometry=geo), "joint")
                rows.append((L, K, T, T / L, res.total_rate))
    return rows


def cmd_sweep_geometry(args, scn):
    rows = sweep_geometry(scn, args.layers, args.atoms, args.thickness, args.spacing)
    header = ("layers", "atoms", "thickness_m", "spacing_m", "total_rate_nats")
    return {"sweep": (header, rows)}, {"points": len(rows)}


def cmd_train_cpf(args, scn):
    ded = train_cpf(scn, use_comm_reward=not args.no_comm_reward)
    rows = [(i, d, r) for i, (d, r) in enumerate(zip(ded.deviation_trace, ded.reward_trace))]
    metrics = {"first10_mean_deviation_m": float(np.mean(ded.deviation_trace[:10])),
               "last100_mean_deviation_m": float(np.mean(ded.deviation_trace[-100:]))}
    for i, (kt, ks, kc) in enumerate(ded.cpf.gains):
        metrics[f"k_tar_{i}"], metrics[f"k_sep_{i}"], metrics[f"k_com_{i}"] = kt, ks, kc
    traj = ded.trajectory
    traj_rows = [(n, m, *traj[n, m]) for n in range(traj.shape[0]) for m in range(traj.shape[1])]
    tables = {"deviation_trace": (("episode", "deviation_m", "reward"), rows),
              "traj": (("slot", "evtol", "x", "y", "z"), traj_rows)}
    return tables, metrics


def cmd_run_dt(args, scn):
    if args.obstacles is not None:
        scn = scn.with_obstacles(args.obstacles)
    loop = scn.loop if args.sync_count is None else replace(scn.loop, sync_count=args.sync_count)
    return run(scn, loop, use_comm_reward=not args.no_comm_reward)


COMMANDS = {
    "optimize-sim": cmd_optimize_sim,
    "baseline-mimo": cmd_baseline_mimo,
    "sweep-geometry": cmd_sweep_geometry,
    "train-cpf": cmd_train_cpf,
    "run-dt": cmd_run_dt,
}


def main(argv=None):
    """Parse ``argv`` and run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        scn = _scenario(args)
        out = COMMANDS[args.command](args, scn)
        files = export_report(out, args.out, args.format) if args.command == "run-dt" \
            else export_tables(args.out, args.format, *out)
    except ConfigError as exc:
        print(f"simdt: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except RunAborted as exc:
        print(f"simdt: run aborted: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"simdt: cannot write output: {exc}", file=sys.stderr)
        return 1
    for f in files:
        print(f)
    return 0


if __name__ == "__main__":
    sys.exit(main())
