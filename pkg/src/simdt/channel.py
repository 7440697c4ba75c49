"""SIM propagation physics: diffraction matrices, cascade, air-ground channels, SINR.

Units follow the milliwatt convention: powers and noise are in mW, channel
gains are linear. Rates are natural-log rates (nats per channel use).
"""
from dataclasses import dataclass
import math

import numpy as np

from . import kernels
from .errors import ConfigError


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


def linear_to_db(x):
    return 10.0 * np.log10(x)


@dataclass(frozen=True)
class SimGeometry:
    """Stacked metasurface layout.

    Layers are parallel to the x-y plane and centred on the z-axis; meta-atoms
    form a centred square grid of pitch ``atom_size``. The M feed antennas sit
    on the plane z = 0 on a line along x (pitch ``antenna_pitch``), and layer 1
    is ``antenna_gap`` above them. ``antenna_xyz`` overrides that layout.
    """

    num_layers: int = 5
    atoms_per_layer: int = 4
    wavelength: float = 0.01
    thickness: float = None
    num_antennas: int = 3
    atom_size: float = None
    antenna_gap: float = None
    antenna_pitch: float = None
    antenna_xyz: tuple = None

    def __post_init__(self):
        lam = self.wavelength
        if not lam > 0:
            raise ConfigError("geometry.wavelength", "must be > 0")
        for name, default in (("thickness", 5 * lam), ("atom_size", lam / 2),
                              ("antenna_gap", lam), ("antenna_pitch", lam / 2)):
            if getattr(self, name) is None:
                object.__setattr__(self, name, float(default))
        if int(self.num_layers) != self.num_layers or self.num_layers < 1:
            raise ConfigError("geometry.num_layers", "must be an integer >= 1")
        K = self.atoms_per_layer
        if int(K) != K or K < 1 or math.isqrt(int(K)) ** 2 != K:
            raise ConfigError("geometry.atoms_per_layer", f"{K} is not a perfect square >= 1")
        if not self.thickness > 0:
            raise ConfigError("geometry.thickness", "must be > 0")
        if not self.atom_size > 0:
            raise ConfigError("geometry.atom_size", "must be > 0")
        if not self.antenna_gap > 0:
            raise ConfigError("geometry.antenna_gap", "must be > 0")
        if int(self.num_antennas) != self.num_antennas or self.num_antennas < 1:
            raise ConfigError("geometry.num_antennas", "must be an integer >= 1")
        if self.antenna_xyz is not None:
            xyz = tuple(tuple(float(c) for c in row) for row in self.antenna_xyz)
            if len(xyz) != self.num_antennas or any(len(r) != 3 for r in xyz):
                raise ConfigError("geometry.antenna_xyz", "need num_antennas rows of 3 coordinates")
            if any(r[2] >= self.antenna_gap for r in xyz):
                raise ConfigError("geometry.antenna_xyz", "antennas must lie below layer 1")
            object.__setattr__(self, "antenna_xyz", xyz)

    @property
    def layer_spacing(self):
        return self.thickness / self.num_layers

    @property
    def grid_side(self):
        return math.isqrt(int(self.atoms_per_layer))

    def atom_xy(self):
        side = self.grid_side
        c = (np.arange(side) - (side - 1) / 2.0) * self.atom_size
        X, Y = np.meshgrid(c, c)  # row-major: k = iy * side + ix
        return np.stack([X.ravel(), Y.ravel()], axis=1)

    def layer_z(self, layer):
        """Height of 1-based ``layer`` above the antenna plane."""
        return self.antenna_gap + (layer - 1) * self.layer_spacing

    def atom_positions(self, layer):
        xy = self.atom_xy()
        return np.column_stack([xy, np.full(len(xy), self.layer_z(layer))])

    def antenna_positions(self):
        if self.antenna_xyz is not None:
            return np.array(self.antenna_xyz, dtype=float)
        M = self.num_antennas
        x = (np.arange(M) - (M - 1) / 2.0) * self.antenna_pitch
        return np.column_stack([x, np.zeros(M), np.zeros(M)])


@dataclass(frozen=True)
class ChannelParams:
    ref_path_loss: float = 1e-3      # rho_0, linear gain at 1 m (-30 dB)
    rician_factor: float = 10.0      # kappa, linear (10 dB)
    path_loss_exp: float = 2.0
    noise_power: float = 1e-9        # mW (-90 dB on the mW scale)
    los_component: complex = 1 + 0j
    array_response: bool = True

    def __post_init__(self):
        if not self.ref_path_loss > 0:
            raise ConfigError("channel.ref_path_loss", "must be > 0")
        if not self.rician_factor >= 0:
            raise ConfigError("channel.rician_factor", "must be >= 0")
        if not self.path_loss_exp > 0:
            raise ConfigError("channel.path_loss_exp", "must be > 0")
        if not self.noise_power > 0:
            raise ConfigError("channel.noise_power", "must be > 0")
        if complex(self.los_component) != 1 + 0j:
            raise ConfigError("channel.los_component", "fixed at 1")


@dataclass(frozen=True)
class StationConfig:
    position: tuple = (0.0, 0.0, 0.0)
    total_power: float = 10.0        # mW (10 dBm)

    def __post_init__(self):
        pos = tuple(float(c) for c in self.position)
        if len(pos) != 3:
            raise ConfigError("station.position", "need 3 coordinates")
        if pos[2] != 0.0:
            raise ConfigError("station.position", "station must be on the ground (z = 0)")
        object.__setattr__(self, "position", pos)
        if not self.total_power > 0:
            raise ConfigError("station.total_power", "must be > 0")


# ---------------------------------------------------------------------------
# Rayleigh-Sommerfeld transmission coefficients


def rs_coefficient(d, cos_chi, atom_size, wavelength):
    """Transmission coefficient between two meta-atoms (or antenna and atom)."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("zero propagation distance (degenerate geometry)")
    area = atom_size * atom_size
    return (area * cos_chi / d) * (1.0 / (2 * np.pi * d) - 1j / wavelength) \
        * np.exp(1j * 2 * np.pi * d / wavelength)


def build_inter_layer_matrix(geom, layer):
    """W^layer: entry (k, k') couples atom k of ``layer - 1`` with atom k' of ``layer``."""
    if not 2 <= layer <= geom.num_layers:
        raise ValueError(f"layer must be in [2, {geom.num_layers}], got {layer}")
    src = geom.atom_positions(layer - 1)
    dst = geom.atom_positions(layer)
    diff = src[:, None, :] - dst[None, :, :]
    d = np.sqrt((diff**2).sum(-1))
    gap = dst[0, 2] - src[0, 2]
    return rs_coefficient(d, gap / d, geom.atom_size, geom.wavelength)


def inter_layer_stack(geom):
    """All inter-layer matrices as one (L-1, K, K) array."""
    K = geom.atoms_per_layer
    mats = [build_inter_layer_matrix(geom, l) for l in range(2, geom.num_layers + 1)]
    if not mats:
        return np.zeros((0, K, K), dtype=np.complex128)
    return np.ascontiguousarray(np.stack(mats))


def build_feed_vectors(geom):
    """(M, K) array; row m is w_m^1."""
    ant = geom.antenna_positions()
    atoms = geom.atom_positions(1)
    diff = ant[:, None, :] - atoms[None, :, :]
    d = np.sqrt((diff**2).sum(-1))
    if np.any(d == 0):
        raise ValueError("antenna coincides with a meta-atom")
    cos_chi = (atoms[None, :, 2] - ant[:, None, 2]) / d
    return rs_coefficient(d, cos_chi, geom.atom_size, geom.wavelength)


def phase_matrix(theta_layer):
    return np.diag(np.exp(1j * np.asarray(theta_layer, dtype=float)))


def cascade_beamforming(theta_slot, inter_layer):
    """G = Psi^L W^L ... Psi^2 W^2 Psi^1 for one slot; ``theta_slot`` is (L, K)."""
    theta_slot = np.asarray(theta_slot, dtype=float)
    G = phase_matrix(theta_slot[0])
    for l in range(1, theta_slot.shape[0]):
        G = phase_matrix(theta_slot[l]) @ inter_layer[l - 1] @ G
    return G


# ---------------------------------------------------------------------------
# Air-ground channel


def link_distance(evtol_pos, station):
    return np.linalg.norm(np.asarray(evtol_pos, dtype=float) - np.asarray(station.position), axis=-1)


def channel_amplitude(d, chan):
    """Line-of-sight magnitude sqrt(rho0 / d^alpha) * sqrt(kappa / (kappa + 1))."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("eVTOL coincides with the station")
    k = chan.rician_factor
    return np.sqrt(chan.ref_path_loss / d**chan.path_loss_exp) * np.sqrt(k / (k + 1.0))


def channel_tensor(positions, station, chan, geom):
    """Channels for positions of shape (..., 3); returns (..., K) complex."""
    positions = np.asarray(positions, dtype=float)
    rel = positions - np.asarray(station.position)
    d = np.linalg.norm(rel, axis=-1)
    amp = channel_amplitude(d, chan) * complex(chan.los_component)
    K = geom.atoms_per_layer
    if not chan.array_response:
        return np.broadcast_to(amp[..., None], d.shape + (K,)).astype(np.complex128)
    u = rel / d[..., None]
    r = geom.atom_positions(geom.num_layers)
    phase = -2 * np.pi * (u @ r.T) / geom.wavelength
    return amp[..., None] * np.exp(1j * phase)


def air_ground_channel(evtol_pos, station, chan, geom):
    return channel_tensor(np.asarray(evtol_pos, dtype=float), station, chan, geom)


# ---------------------------------------------------------------------------
# SINR and rates
#
# Cross gains g[..., m, m'] are the gain seen at receiver m from stream m'.
# For the SIM link g[m, m'] = |h_m'^H G w_m'|^2 (identical rows); for the MIMO
# baseline g[m, m'] = h_m^2.


def sim_cross_gains(a):
    a = np.asarray(a, dtype=float)
    M = a.shape[-1]
    return np.broadcast_to(a[..., None, :], a.shape[:-1] + (M, M)).copy()


def sinr_from_cross_gains(g, p, sigma2):
    g = np.asarray(g, dtype=float)
    p = np.asarray(p, dtype=float)
    M = g.shape[-1]
    rx = g * p[..., None, :]
    own = np.diagonal(rx, axis1=-2, axis2=-1)
    interf = (rx * (1.0 - np.eye(M))).sum(-1)
    return own / (interf + sigma2)


def rates_from_cross_gains(g, p, sigma2):
    return np.log1p(sinr_from_cross_gains(g, p, sigma2))


def sinr_and_rates(h, G, feeds, power, sigma2):
    """Per-user SINR and rate for one slot. ``h`` and ``feeds`` are (M, K)."""
    z = np.einsum("mk,kj,mj->m", np.conj(h), G, feeds)
    a = np.abs(z) ** 2
    sinr = sinr_from_cross_gains(sim_cross_gains(a), power, sigma2)
    return sinr, np.log1p(sinr)


def slot_gains(theta, W, feeds, h):
    """a[n, m] = |h_m^H G[n] w_m|^2 for all slots."""
    z = kernels.cascade_response(np.ascontiguousarray(theta, dtype=float), W,
                                 np.ascontiguousarray(feeds), np.ascontiguousarray(h))
    return np.abs(z) ** 2


def sim_rates(theta, W, feeds, h, p, sigma2):
    """Per-slot, per-user rates (N, M)."""
    return rates_from_cross_gains(sim_cross_gains(slot_gains(theta, W, feeds, h)), p, sigma2)


# ---------------------------------------------------------------------------
# MIMO baseline (no SIM)


def mimo_cross_gains(positions, station, chan):
    d = link_distance(positions, station)
    h2 = channel_amplitude(d, chan) ** 2
    M = h2.shape[-1]
    return np.broadcast_to(h2[..., :, None], h2.shape + (M,)).copy()


def mimo_baseline_rate(positions, power, chan, station):
    """Total MIMO rate over slots; ``positions`` is (N, M, 3), ``power`` (N, M)."""
    g = mimo_cross_gains(positions, station, chan)
    return float(rates_from_cross_gains(g, power, chan.noise_power).sum())


@dataclass
class SimContext:
    """Everything the SIM optimizers need for a fixed trajectory."""

    W: np.ndarray
    feeds: np.ndarray
    h: np.ndarray               # (N, M, K)
    sigma2: float
    total_power: float

    @classmethod
    def build(cls, geom, chan, station, positions):
        return cls(W=inter_layer_stack(geom), feeds=np.ascontiguousarray(build_feed_vectors(geom)),
                   h=np.ascontiguousarray(channel_tensor(positions, station, chan, geom)),
                   sigma2=chan.noise_power, total_power=station.total_power)

    @property
    def num_slots(self):
        return self.h.shape[0]

    def gains(self, theta):
        return slot_gains(theta, self.W, self.feeds, self.h)

    def rates(self, theta, p):
        return sim_rates(theta, self.W, self.feeds, self.h, p, self.sigma2)

    def sum_rate(self, theta, p):
        return float(self.rates(theta, p).sum())
