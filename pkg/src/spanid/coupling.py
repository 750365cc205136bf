"""Rail, train and sleeper layer, coupled to the bridge as one LTV system.

State ordering is ``{q_R; u_B}``: all rail modal coordinates first (rail 0's
modes, then rail 1's, ...), then the bridge DOFs. Displacements are positive
upward, so gravity axle loads enter the rail modal forces with a minus sign.
The only time dependence is the moving axle mass on the rail block and the
moving axle loads; the mass matrix is therefore block diagonal at every t.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .errors import InputError, MappingError, PhysicalInconsistencyError, CacheMissError

logger = logging.getLogger(__name__)

DEFAULT_SLEEPER_STIFFNESS = 2.0e8  # N/m
DEFAULT_SLEEPER_DAMPING = 5.0e4  # N s/m
DEFAULT_RAIL_MODES = 5
MPH_TO_MPS = 0.44704


@dataclass(frozen=True)
class RailModel:
    """Simply supported rail over the span, described by sine assumed modes."""

    length: float
    flexural_rigidity: float
    mass_per_length: float
    n_modes: int = DEFAULT_RAIL_MODES
    damping_ratio: float = 0.0
    origin: float = 0.0  # bridge coordinate of the rail's x = 0

    def __post_init__(self):
        if self.n_modes < 1:
            raise InputError("rail needs at least one mode")
        if self.flexural_rigidity <= 0 or self.mass_per_length <= 0 or self.length <= 0:
            raise InputError("rail EI, mass per length and length must be > 0")

    def mode_shapes(self, x):
        """``phi_k(x) = sin(k pi x / L)`` for k = 1..n_modes; zero off the rail."""
        x = np.asarray(x, dtype=float)
        k = np.arange(1, self.n_modes + 1)
        phi = np.sin(np.multiply.outer(x, k) * np.pi / self.length)
        on = (x >= 0.0) & (x <= self.length)
        return phi * on[..., None]

    def modal_frequencies(self):
        k = np.arange(1, self.n_modes + 1)
        return (k * np.pi / self.length) ** 2 * np.sqrt(self.flexural_rigidity / self.mass_per_length)


@dataclass(frozen=True)
class Axle:
    mass: float
    load: float
    offset: float


@dataclass(frozen=True)
class TrainConfig:
    axles: tuple
    velocity: float
    entry_time: float = 0.0
    track: int = 0

    def __post_init__(self):
        if self.velocity <= 0:
            raise InputError("train velocity must be > 0")
        offs = [a.offset for a in self.axles]
        if any(b <= a for a, b in zip(offs, offs[1:])):
            raise InputError("axle offsets must be strictly increasing")
        if any(a.mass < 0 or a.load < 0 for a in self.axles):
            raise InputError("axle masses and loads must be >= 0")

    @property
    def masses(self):
        return np.array([a.mass for a in self.axles], dtype=float)

    @property
    def loads(self):
        return np.array([a.load for a in self.axles], dtype=float)

    @property
    def offsets(self):
        return np.array([a.offset for a in self.axles], dtype=float)

    @property
    def length(self):
        return float(self.offsets.max()) if self.axles else 0.0

    def positions(self, t):
        """Axle positions along the rail at time(s) ``t`` (shape ``t.shape + (n_axles,)``)."""
        t = np.asarray(t, dtype=float)
        return self.velocity * (t[..., None] - self.entry_time) - self.offsets

    def crossing_time(self, span):
        return self.entry_time + (span + self.length) / self.velocity

    def with_zero_mass(self):
        return replace(self, axles=tuple(Axle(0.0, a.load, a.offset) for a in self.axles))


def parse_velocity(value):
    """Velocity in m/s from a number or a string with ``mps``/``mph`` suffix."""
    if isinstance(value, (int, float)):
        return float(value)
    s = str(value).strip().lower().replace(" ", "")
    for suffix, factor in (("mph", MPH_TO_MPS), ("mps", 1.0), ("m/s", 1.0)):
        if s.endswith(suffix):
            return float(s[: -len(suffix)]) * factor
    return float(s)


@dataclass(frozen=True)
class InteractionLayer:
    """Discrete spring-dashpots between one rail and bridge translational DOFs."""

    positions: np.ndarray
    stiffness: np.ndarray
    damping: np.ndarray
    attach: np.ndarray  # bridge translational DOF index per sleeper

    def __post_init__(self):
        n = len(self.positions)
        for name in ("stiffness", "damping", "attach"):
            if len(getattr(self, name)) != n:
                raise InputError(f"interaction layer: {name} length mismatch")
        if np.any(np.asarray(self.stiffness) < 0) or np.any(np.asarray(self.damping) < 0):
            raise InputError("sleeper stiffness and damping must be >= 0")

    @classmethod
    def uniform(cls, positions, attach, stiffness=DEFAULT_SLEEPER_STIFFNESS,
                damping=DEFAULT_SLEEPER_DAMPING):
        positions = np.asarray(positions, dtype=float)
        n = len(positions)
        return cls(positions, np.full(n, float(stiffness)), np.full(n, float(damping)),
                   np.asarray(attach, dtype=int))


def rail_modal_matrices(rail):
    """Diagonal modal mass, stiffness and damping of a sine-mode rail."""
    k = np.arange(1, rail.n_modes + 1)
    m = np.full(rail.n_modes, rail.mass_per_length * rail.length / 2.0)
    kk = rail.flexural_rigidity * (k * np.pi / rail.length) ** 4 * rail.length / 2.0
    c = 2.0 * rail.damping_ratio * np.sqrt(kk * m)
    return np.diag(m), np.diag(kk), np.diag(c)


def time_varying_mass(train, rail, t):
    """``Delta M_R(t) = sum_i m_i phi(x_i) phi(x_i)^T`` over axles on the rail."""
    phi = rail.mode_shapes(train.positions(t))  # (..., n_axles, n_modes)
    dm = np.einsum("...a,...aj,...ak->...jk", train.masses, phi, phi)
    return 0.5 * (dm + np.swapaxes(dm, -1, -2))


def moving_force(train, rail, t):
    """Rail modal force ``p_R,k(t) = -sum_i W_i phi_k(x_i(t))``."""
    phi = rail.mode_shapes(train.positions(t))
    return -np.einsum("...a,...ak->...k", train.loads, phi)


@dataclass(frozen=True)
class TrackSystem:
    """Rail/sleeper part of the coupled matrices; independent of bridge damage."""

    rails: tuple
    layers: tuple
    n_bridge: int
    K: np.ndarray  # (n, n), bridge-bridge block holds only sleeper terms
    C: np.ndarray
    M_rail: np.ndarray  # (nr, nr)
    rail_slices: tuple

    @property
    def n_rail(self):
        return self.M_rail.shape[0]

    @property
    def size(self):
        return self.n_rail + self.n_bridge


def build_track(rails, layers, n_bridge, fixed_check=None):
    """Rail modal blocks plus sleeper coupling for a bridge with ``n_bridge`` DOFs."""
    rails, layers = tuple(rails), tuple(layers)
    if len(rails) != len(layers):
        raise InputError("one interaction layer per rail required")
    nr = sum(r.n_modes for r in rails)
    n = nr + n_bridge
    K = np.zeros((n, n))
    C = np.zeros((n, n))
    Mr = np.zeros((nr, nr))
    slices = []
    start = 0
    for rail, layer in zip(rails, layers):
        sl = slice(start, start + rail.n_modes)
        slices.append(sl)
        m, kk, cc = rail_modal_matrices(rail)
        Mr[sl, sl] = m
        K[sl, sl] += kk
        C[sl, sl] += cc
        attach = np.asarray(layer.attach, dtype=int)
        if np.any(attach < 0) or np.any(attach >= n_bridge):
            raise MappingError("sleeper attached to a fixed, condensed or unknown DOF")
        phi = rail.mode_shapes(layer.positions)  # (n_sleepers, n_modes)
        for s in range(len(layer.positions)):
            d = nr + attach[s]
            for X, val in ((K, layer.stiffness[s]), (C, layer.damping[s])):
                X[sl, sl] += val * np.outer(phi[s], phi[s])
                X[d, d] += val
                X[sl, d] -= val * phi[s]
                X[d, sl] -= val * phi[s]
        start += rail.n_modes
    return TrackSystem(rails, layers, n_bridge, K, C, Mr, tuple(slices))


@dataclass(frozen=True)
class CoupledLtvSystem:
    """``M(t) u'' + C u' + K u = p(t)`` with ``u = {q_R; u_B}``.

    ``M(t) = blkdiag(M_R + Delta M_R(t), M_B)``. Trains load the rail given by
    their ``track`` index.
    """

    track: TrackSystem
    M_bridge: np.ndarray
    C: np.ndarray
    K: np.ndarray
    trains: tuple = ()
    bridge_dofs: np.ndarray | None = None  # bridge DOF labels (translational indices)

    @property
    def n_rail(self):
        return self.track.n_rail

    @property
    def n_bridge(self):
        return self.M_bridge.shape[0]

    @property
    def size(self):
        return self.n_rail + self.n_bridge

    @property
    def M_const(self):
        return scipy.linalg.block_diag(self.track.M_rail, self.M_bridge)

    def delta_mass(self, t):
        """Rail-block mass increment at time(s) ``t`` (shape ``t.shape + (nr, nr)``)."""
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape + (self.n_rail, self.n_rail))
        for train in self.trains:
            rail = self.track.rails[train.track]
            sl = self.track.rail_slices[train.track]
            out[..., sl, sl] += time_varying_mass(train, rail, t)
        return out

    def rail_force(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape + (self.n_rail,))
        for train in self.trains:
            rail = self.track.rails[train.track]
            sl = self.track.rail_slices[train.track]
            out[..., sl] += moving_force(train, rail, t)
        return out

    def force(self, t):
        pr = self.rail_force(t)
        pad = np.zeros(np.shape(pr)[:-1] + (self.n_bridge,))
        return np.concatenate([pr, pad], axis=-1)

    def mass(self, t):
        M = self.M_const
        M[: self.n_rail, : self.n_rail] += self.delta_mass(t)
        return M

    def with_bridge(self, M_bridge, C_bridge, K_bridge, bridge_dofs=None):
        """Same track/trains over different bridge matrices (same size)."""
        return couple_matrices(self.track, M_bridge, C_bridge, K_bridge, self.trains,
                               bridge_dofs if bridge_dofs is not None else self.bridge_dofs)

    def with_trains(self, trains):
        return replace(self, trains=tuple(trains))


def couple_matrices(track, M_bridge, C_bridge, K_bridge, trains=(), bridge_dofs=None):
    nr = track.n_rail
    if M_bridge.shape[0] != track.n_bridge:
        raise MappingError("bridge size does not match the track coupling")
    K = track.K.copy()
    C = track.C.copy()
    K[nr:, nr:] += K_bridge
    C[nr:, nr:] += C_bridge
    return CoupledLtvSystem(track, np.asarray(M_bridge, float), 0.5 * (C + C.T), 0.5 * (K + K.T),
                            tuple(trains), bridge_dofs)


def couple_systems(bridge, rails, layers, trains=()):
    """Assemble the coupled LTV system from bridge :class:`SystemMatrices`."""
    if isinstance(rails, RailModel):
        rails, layers = (rails,), (layers,)
    track = build_track(rails, layers, bridge.size)
    return couple_matrices(track, bridge.mass, bridge.damping, bridge.stiffness, trains)


@dataclass
class MassInverseCache:
    """Per-timestamp factorizations of ``M_total(t)``.

    Only the rail block varies in time, so each entry stores the inverse of
    ``M_R + Delta M_R(t)``; the bridge block is factorized once.
    """

    times: np.ndarray
    rail_mass: np.ndarray  # (N, nr, nr) = M_R + Delta M_R(t)
    rail_inv: np.ndarray  # (N, nr, nr)
    bridge_cho: tuple
    bridge_inv: np.ndarray
    strict: bool = True
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {float(t): i for i, t in enumerate(self.times)}

    def __len__(self):
        return len(self.times)

    def index_of(self, t):
        try:
            return self._index[float(t)]
        except KeyError:
            raise CacheMissError(f"no cached mass factorization for t={t}") from None

    def solve(self, idx, rhs):
        """``M_total(t_idx)^-1 rhs`` for a vector or matrix right-hand side."""
        nr = self.rail_inv.shape[1]
        rhs = np.asarray(rhs, dtype=float)
        out = np.empty_like(rhs)
        out[:nr] = self.rail_inv[idx] @ rhs[:nr]
        out[nr:] = scipy.linalg.cho_solve(self.bridge_cho, rhs[nr:])
        return out


def _check_spd(mats, what):
    try:
        return np.linalg.cholesky(mats)
    except np.linalg.LinAlgError:
        raise PhysicalInconsistencyError(f"{what} is not positive definite") from None


def precompute_mass_inverses(system, timestamps, strict=True):
    times = np.asarray(timestamps, dtype=float)
    rail_mass = system.track.M_rail + system.delta_mass(times)
    rail_mass = 0.5 * (rail_mass + np.swapaxes(rail_mass, -1, -2))
    L = _check_spd(rail_mass, "rail mass block")
    eye = np.broadcast_to(np.eye(system.n_rail), rail_mass.shape)
    Linv = np.linalg.solve(L, eye)
    rail_inv = np.swapaxes(Linv, -1, -2) @ Linv
    try:
        cho = scipy.linalg.cho_factor(system.M_bridge)
    except np.linalg.LinAlgError:
        raise PhysicalInconsistencyError("bridge mass matrix is not positive definite") from None
    binv = scipy.linalg.cho_solve(cho, np.eye(system.n_bridge))
    return MassInverseCache(times, rail_mass, np.ascontiguousarray(rail_inv), cho,
                            0.5 * (binv + binv.T), strict)
