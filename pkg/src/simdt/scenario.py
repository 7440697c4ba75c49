"""Scenario files (YAML): one file fixes every parameter and seed of a run.

Fields ending in ``_db`` are decibel values converted on load (powers use the
mW scale). Saved files always carry linear values so save/load is exact.
"""
from dataclasses import dataclass, field, fields, asdict, replace
import math

import numpy as np
import yaml

from .channel import ChannelParams, SimGeometry, StationConfig, db_to_linear
from .dqn import DQNConfig, RewardParams
from .errors import ConfigError
from .flight import CPFParams, Corridor, KinematicParams, Obstacle
from .orchestrator import LoopConfig

DEFAULT_CENTERLINE = ((200.0, 0.0, 100.0), (420.0, 60.0, 110.0), (650.0, 60.0, 120.0))
DEFAULT_RADIUS = 35.0
FLEET_SPACING = 25.0       # metres between consecutive eVTOLs along the corridor
LATERAL_OFFSET = 14.0      # alternating sideways entry offset

# Obstacles along the default corridor, in the order they are enabled. Each sits
# 65 m off the centerline on alternating sides and reaches 20 m into the tube.
OBSTACLE_PRESET = (
    Obstacle((288.9, 91.6, 104.8), 50.0),
    Obstacle((400.2, -12.8, 108.3), 50.0),
    Obstacle((461.7, 125.0, 111.8), 50.0),
    Obstacle((541.6, -5.0, 115.3), 50.0),
    Obstacle((601.6, 125.0, 117.9), 50.0),
)


def default_corridor(M, centerline=DEFAULT_CENTERLINE, radius=DEFAULT_RADIUS):
    """Single-file platoon: staggered entries with alternating sideways offsets."""
    base = Corridor(centerline, radius, entries=(centerline[0],), exits=(centerline[-1],))
    L = base.length
    s_in = FLEET_SPACING * np.arange(M)[::-1]
    entries = base.point_at(s_in) + np.outer((-1.0) ** np.arange(M), [0.0, LATERAL_OFFSET, 0.0])
    exits = base.point_at(L - FLEET_SPACING * np.arange(M))
    return Corridor(centerline, radius, entries=entries, exits=exits)


def default_cpf(M):
    return CPFParams.uniform(M, 0.03, 25.0, 0.015, d_sep=15.0, d_com=25.0, d_max=60.0)


@dataclass
class Scenario:
    num_slots: int = 30
    num_evtols: int = 3
    seed: int = 7
    geometry: SimGeometry = None
    channel: ChannelParams = field(default_factory=ChannelParams)
    station: StationConfig = field(default_factory=StationConfig)
    corridor: Corridor = None
    obstacles: tuple = ()
    kinematics: KinematicParams = field(default_factory=KinematicParams)
    cpf: CPFParams = None
    reward: RewardParams = field(default_factory=RewardParams)
    dqn: DQNConfig = field(default_factory=DQNConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)

    def __post_init__(self):
        M = self.num_evtols
        if int(M) != M or M < 1:
            raise ConfigError("num_evtols", "must be an integer >= 1")
        if int(self.num_slots) != self.num_slots or self.num_slots < 1:
            raise ConfigError("num_slots", "must be an integer >= 1")
        if self.geometry is None:
            self.geometry = SimGeometry(num_antennas=M)
        if self.corridor is None:
            self.corridor = default_corridor(M)
        if self.cpf is None:
            self.cpf = default_cpf(M)
        self.obstacles = tuple(self.obstacles)
        if self.geometry.num_antennas != M:
            raise ConfigError("geometry.num_antennas", f"must equal num_evtols ({M})")
        if self.corridor.num_evtols != M:
            raise ConfigError("corridor.entries", f"need {M} entries and exits")
        if len(self.cpf.k_tar) != M:
            raise ConfigError("cpf.k_tar", f"need {M} gains")
        reach = self.num_slots * self.kinematics.max_step
        c = self.corridor
        gap = [c.route_length(a, b) for a, b in zip(c.entries, c.exits)]
        if max(gap) > reach:
            raise ConfigError("corridor.exits", "an exit cannot be reached within num_slots")

    def with_obstacles(self, count, pool=None):
        """Copy with the first ``count`` obstacles of ``pool`` (default: the preset list)."""
        pool = OBSTACLE_PRESET if pool is None else tuple(pool)
        if count > len(pool):
            raise ConfigError("obstacles", f"only {len(pool)} obstacles available")
        return replace(self, obstacles=tuple(pool[:count]))

    def to_dict(self):
        g = asdict(self.geometry)
        if g["antenna_xyz"] is None:
            del g["antenna_xyz"]
        else:
            g["antenna_xyz"] = [list(r) for r in g["antenna_xyz"]]
        ch = asdict(self.channel)
        ch.pop("los_component")
        c = self.corridor
        return {
            "num_slots": self.num_slots,
            "num_evtols": self.num_evtols,
            "seed": self.seed,
            "geometry": g,
            "channel": ch,
            "station": {"position": list(self.station.position),
                        "total_power": self.station.total_power},
            "corridor": {"centerline": [list(p) for p in c.centerline], "radius": c.radius,
                         "entries": [list(p) for p in c.entries],
                         "exits": [list(p) for p in c.exits]},
            "obstacles": [{"center": list(o.center), "radius": o.radius} for o in self.obstacles],
            "kinematics": asdict(self.kinematics),
            "cpf": {"k_tar": self.cpf.k_tar.tolist(), "k_sep": self.cpf.k_sep.tolist(),
                    "k_com": self.cpf.k_com.tolist(), "d_sep": self.cpf.d_sep,
                    "d_com": self.cpf.d_com, "d_max": self.cpf.d_max},
            "reward": asdict(self.reward),
            "dqn": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.dqn).items()},
            "loop": asdict(self.loop),
        }

    def __eq__(self, other):
        return isinstance(other, Scenario) and self.to_dict() == other.to_dict()


# ---------------------------------------------------------------------------
# Parsing


def _section(data, name):
    sec = data.get(name, {}) or {}
    if not isinstance(sec, dict):
        raise ConfigError(name, "must be a mapping")
    return dict(sec)


def _convert_db(sec, prefix, key, target=None):
    """Replace ``key_db`` by its linear value under ``target`` (default ``key``)."""
    target = target or key
    if f"{key}_db" in sec:
        if target in sec:
            raise ConfigError(f"{prefix}.{key}_db", f"give either {key}_db or {target}")
        sec[target] = float(db_to_linear(sec.pop(f"{key}_db")))


def _build(cls, sec, prefix, **extra):
    names = {f.name for f in fields(cls)}
    unknown = set(sec) - names
    if unknown:
        raise ConfigError(f"{prefix}.{sorted(unknown)[0]}", "unknown field")
    try:
        return cls(**sec, **extra)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix, str(exc)) from exc


def scenario_from_dict(data):
    data = dict(data or {})
    known = {f.name for f in fields(Scenario)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown field")
    M = data.get("num_evtols", 3)
    if not isinstance(M, int) or M < 1:
        raise ConfigError("num_evtols", "must be an integer >= 1")
    kw = {k: data[k] for k in ("num_slots", "num_evtols", "seed") if k in data}

    geo = _section(data, "geometry")
    geo.setdefault("num_antennas", M)
    if "antenna_xyz" in geo and geo["antenna_xyz"] is not None:
        geo["antenna_xyz"] = tuple(tuple(r) for r in geo["antenna_xyz"])
    kw["geometry"] = _build(SimGeometry, geo, "geometry")

    ch = _section(data, "channel")
    _convert_db(ch, "channel", "ref_path_loss")
    _convert_db(ch, "channel", "rician_factor")
    _convert_db(ch, "channel", "noise_power")
    kw["channel"] = _build(ChannelParams, ch, "channel")

    st = _section(data, "station")
    _convert_db(st, "station", "total_power")
    if "position" in st:
        st["position"] = tuple(st["position"])
    kw["station"] = _build(StationConfig, st, "station")

    if "corridor" in data:
        co = _section(data, "corridor")
        if "entries" not in co and "exits" not in co:
            kw["corridor"] = default_corridor(M, tuple(map(tuple, co.get("centerline", DEFAULT_CENTERLINE))),
                                              co.get("radius", DEFAULT_RADIUS))
        else:
            kw["corridor"] = _build(Corridor, co, "corridor")

    obs = data.get("obstacles", []) or []
    kw["obstacles"] = tuple(_build(Obstacle, dict(o), f"obstacles[{i}]") for i, o in enumerate(obs))

    kw["kinematics"] = _build(KinematicParams, _section(data, "kinematics"), "kinematics")

    cp = _section(data, "cpf")
    base = default_cpf(M)
    for name in ("k_tar", "k_sep", "k_com"):
        v = cp.get(name, getattr(base, name))
        cp[name] = np.full(M, float(v)) if np.isscalar(v) else np.asarray(v, dtype=float)
    kw["cpf"] = _build(CPFParams, cp, "cpf")

    kw["reward"] = _build(RewardParams, _section(data, "reward"), "reward")
    dq = _section(data, "dqn")
    for key in ("hidden", "gain_ceiling"):
        if key in dq and dq[key] is not None:
            dq[key] = tuple(dq[key])
    kw["dqn"] = _build(DQNConfig, dq, "dqn")
    kw["loop"] = _build(LoopConfig, _section(data, "loop"), "loop")
    return Scenario(**kw)


def load_scenario(path):
    with open(path, encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError("file", f"not valid YAML: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError("file", "top level must be a mapping")
    return scenario_from_dict(data)


def save_scenario(scn, path):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(scn.to_dict(), fh, sort_keys=False)
