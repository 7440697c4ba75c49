"""CSV / JSON export of run results with fixed 12-significant-digit formatting."""
import csv
import json
import os

import numpy as np

from .orchestrator import RunReport

DIGITS = 12


def fmt(x):
    """Locale-independent text for one value."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), f".{DIGITS}g")
    return str(x)


def round_sig(x):
    """Round floats (recursively through lists and dicts) to 12 significant digits."""
    if isinstance(x, dict):
        return {k: round_sig(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [round_sig(v) for v in x]
    if isinstance(x, np.ndarray):
        return round_sig(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(format(float(x), f".{DIGITS}g"))
    return x


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def write_json(path, data):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(round_sig(data), fh, indent=1, sort_keys=True, allow_nan=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Run reports


def report_to_dict(rep):
    return {
        "rates": rep.rates, "twin_trajectory": rep.twin_trajectory,
        "physical_trajectory": rep.physical_trajectory, "mean_deviation": rep.mean_deviation,
        "min_separation": rep.min_separation, "divergence": rep.divergence, "gains": rep.gains,
        "bcd_trace": rep.bcd_trace, "deviation_trace": rep.deviation_trace,
        "reward_trace": rep.reward_trace, "p": rep.p, "theta": rep.theta,
        "obstacle_clearance": rep.obstacle_clearance, "violations": rep.violations,
        "total_rate": rep.total_rate,
    }


def report_from_dict(d):
    arr = lambda k: np.array(d[k], dtype=float)
    return RunReport(rates=arr("rates"), twin_trajectory=arr("twin_trajectory"),
                     physical_trajectory=arr("physical_trajectory"),
                     mean_deviation=float(d["mean_deviation"]), min_separation=float(d["min_separation"]),
                     divergence=list(d["divergence"]), gains=arr("gains"),
                     bcd_trace=list(d["bcd_trace"]), deviation_trace=list(d["deviation_trace"]),
                     reward_trace=list(d["reward_trace"]), p=arr("p"), theta=arr("theta"),
                     obstacle_clearance=float(d["obstacle_clearance"]),
                     violations=dict(d["violations"]))


def load_report_json(path):
    with open(path, encoding="utf-8") as fh:
        return report_from_dict(json.load(fh))


def report_metrics(rep):
    m = {"total_rate_nats": rep.total_rate, "mean_deviation_m": rep.mean_deviation,
         "min_separation_m": rep.min_separation, "obstacle_clearance_m": rep.obstacle_clearance,
         "sync_count": len(rep.divergence)}
    for i, (kt, ks, kc) in enumerate(np.asarray(rep.gains)):
        m[f"k_tar_{i}"], m[f"k_sep_{i}"], m[f"k_com_{i}"] = kt, ks, kc
    for k, v in rep.violations.items():
        m[f"violations_{k}"] = v
    return m


def rate_rows(rates):
    N, M = np.shape(rates)
    return [(n + 1, m, rates[n][m]) for n in range(N) for m in range(M)]


def traj_rows(world_trajs):
    rows = []
    for world, traj in world_trajs:
        traj = np.asarray(traj)
        for n in range(traj.shape[0]):
            for m in range(traj.shape[1]):
                rows.append((n, m, world, *traj[n, m]))
    return rows


def export_report(rep, out_dir, fmt_name="csv"):
    """Write a RunReport; returns the list of files written."""
    os.makedirs(out_dir, exist_ok=True)
    if fmt_name == "json":
        path = os.path.join(out_dir, "report.json")
        write_json(path, report_to_dict(rep))
        return [path]
    if fmt_name != "csv":
        raise ValueError(f"unknown format {fmt_name!r}")
    files = [os.path.join(out_dir, f) for f in ("rates.csv", "traj.csv", "metrics.csv", "divergence.csv")]
    write_csv(files[0], ("slot", "evtol", "rate_nats"), rate_rows(rep.rates))
    write_csv(files[1], ("slot", "evtol", "world", "x", "y", "z"),
              traj_rows([("twin", rep.twin_trajectory), ("phys", rep.physical_trajectory)]))
    write_csv(files[2], ("metric", "value"), report_metrics(rep).items())
    div_rows = [(d["slot"], m, b, a) for d in rep.divergence
                for m, (b, a) in enumerate(zip(d["before"], d["after"]))]
    write_csv(files[3], ("slot", "evtol", "before_m", "after_m"), div_rows)
    return files


def export_tables(out_dir, fmt_name, tables, metrics):
    """Generic export: ``tables`` maps file stem -> (header, rows)."""
    os.makedirs(out_dir, exist_ok=True)
    if fmt_name == "json":
        data = {"metrics": dict(metrics)}
        for stem, (header, rows) in tables.items():
            data[stem] = [dict(zip(header, row)) for row in rows]
        path = os.path.join(out_dir, "report.json")
        write_json(path, data)
        return [path]
    if fmt_name != "csv":
        raise ValueError(f"unknown format {fmt_name!r}")
    files = []
    for stem, (header, rows) in tables.items():
        files.append(os.path.join(out_dir, f"{stem}.csv"))
        write_csv(files[-1], header, rows)
    files.append(os.path.join(out_dir, "metrics.csv"))
    write_csv(files[-1], ("metric", "value"), list(metrics.items()))
    return files
