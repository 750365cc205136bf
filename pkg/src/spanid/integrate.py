"""Time integration of the coupled LTV system.

:func:`rk4_step` and :func:`radau_step` are direct single-step reference
implementations. Whole crossings go through :class:`Propagator`, which
precomputes the time-dependent rail data once and drives the compiled sweeps
in :mod:`spanid.kernels`.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import kernels
from .coupling import precompute_mass_inverses
from .errors import InputError, InstabilityError, StepFailureError
from .fe_model import natural_frequencies

logger = logging.getLogger(__name__)

SCHEMES = ("rk4", "radau")
DEFAULT_CHECKPOINT = 64


@dataclass(frozen=True)
class RadauTableau:
    A: np.ndarray = kernels.RADAU_A
    b: np.ndarray = kernels.RADAU_B
    c: np.ndarray = kernels.RADAU_C
    order: int = 3

    @property
    def stages(self):
        return len(self.b)

    def stability(self, z):
        """``R(z) = 1 + z b^T (I - z A)^-1 1``."""
        z = np.asarray(z, dtype=complex)
        return (1 + z / 3) / (1 - 2 * z / 3 + z * z / 6)


RADAU = RadauTableau()


@dataclass
class Trajectory:
    timestamps: np.ndarray
    states: np.ndarray  # (N+1, 2n)
    accelerations: np.ndarray | None = None
    labels: list | None = None  # per-DOF labels, length n

    @property
    def n(self):
        return self.states.shape[1] // 2

    @property
    def dt(self):
        return float(self.timestamps[1] - self.timestamps[0])

    @property
    def displacements(self):
        return self.states[:, : self.n]

    @property
    def velocities(self):
        return self.states[:, self.n:]


def first_order_rhs(system, t, X, cache=None):
    """``dX/dt = [v; M(t)^-1 (p(t) - C v - K u)]``.

    With a :class:`~spanid.coupling.MassInverseCache`, ``t`` must be one of the
    cached timestamps (a miss raises :class:`~spanid.errors.CacheMissError`).
    """
    X = np.asarray(X, dtype=float)
    n = system.size
    u, v = X[:n], X[n:]
    f = system.force(t) - system.C @ v - system.K @ u
    if cache is not None:
        acc = cache.solve(cache.index_of(t), f)
    else:
        acc = np.linalg.solve(system.mass(t), f)
    return np.concatenate([v, acc])


def _check_finite(X, where):
    if not np.all(np.isfinite(X)):
        raise InstabilityError(f"non-finite state {where}; the timestep is probably too large")


def rk4_step(system, X, t, dt):
    k1 = first_order_rhs(system, t, X)
    k2 = first_order_rhs(system, t + dt / 2, X + dt / 2 * k1)
    k3 = first_order_rhs(system, t + dt / 2, X + dt / 2 * k2)
    k4 = first_order_rhs(system, t + dt, X + dt * k3)
    Xn = X + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    _check_finite(Xn, f"after RK-4 step at t={t}")
    return Xn


def radau_step(system, X, t, dt, tableau=RADAU):
    """One Radau IIA step on the first-order system, solved as one block system.

    Force and mass are frozen at ``t``: with ``J`` the first-order Jacobian at
    ``t`` the stages solve ``(I - dt A (x) J) K = 1 (x) f(t, X)``.
    """
    X = np.asarray(X, dtype=float)
    n = system.size
    W = np.linalg.inv(system.mass(t))
    J = np.block([[np.zeros((n, n)), np.eye(n)], [-W @ system.K, -W @ system.C]])
    f0 = first_order_rhs(system, t, X)
    s = tableau.stages
    big = np.eye(s * 2 * n) - dt * np.kron(tableau.A, J)
    try:
        stages = np.linalg.solve(big, np.tile(f0, s))
    except np.linalg.LinAlgError as exc:
        raise StepFailureError(str(exc)) from exc
    stages = stages.reshape(s, 2 * n)
    Xn = X + dt * tableau.b @ stages
    _check_finite(Xn, f"after Radau step at t={t}")
    return Xn


def round_one_significant(x):
    """Round a positive number to one significant figure (nearest)."""
    if x <= 0:
        raise ValueError("expected a positive value")
    e = math.floor(math.log10(x))
    d = round(x / 10**e)
    if d == 10:
        d, e = 1, e + 1
    return d * 10.0**e


def timestep_rule(f_max, scheme="rk4", target=0.002):
    """``dt`` from the highest frequency (explicit) or the accuracy target (implicit)."""
    if scheme == "rk4":
        return round_one_significant(1.0 / f_max / 10.0)
    if scheme == "radau":
        return float(target)
    raise InputError(f"unknown scheme {scheme!r}")


def system_f_max(system):
    w = natural_frequencies(system.M_const, system.K)
    return w[-1] / (2 * np.pi)


def select_timestep(system, scheme="rk4", target=0.002):
    """Explicit: ``T_min/10`` to one significant figure. Implicit: ``target``."""
    if scheme == "radau":
        return timestep_rule(None, scheme, target)
    return timestep_rule(system_f_max(system), scheme)


def finite_difference_acceleration(V, dt):
    """First-order backward differences of velocity; the first sample copies the second."""
    V = np.asarray(V, dtype=float)
    A = np.zeros_like(V)
    if len(V) < 2:
        return A
    A[1:] = np.diff(V, axis=0) / dt
    A[0] = A[1]
    return A


def finite_difference_acceleration_vjp(Abar, dt):
    """Transpose of :func:`finite_difference_acceleration`."""
    Abar = np.array(Abar, dtype=float)
    Vbar = np.zeros_like(Abar)
    if len(Abar) < 2:
        return Vbar
    Abar[1] += Abar[0]
    Vbar[1:] += Abar[1:] / dt
    Vbar[:-1] -= Abar[1:] / dt
    return Vbar


class Propagator:
    """Fast sweeps of one crossing on a fixed uniform grid.

    Rail mass inverses and rail forces are precomputed on the half-step grid;
    :meth:`set_bridge` swaps in new bridge blocks (the damaged or reduced
    bridge) without redoing that work.
    """

    def __init__(self, system, dt, nsteps, scheme="rk4", checkpoint=DEFAULT_CHECKPOINT):
        if scheme not in SCHEMES:
            raise InputError(f"unknown scheme {scheme!r}")
        if dt <= 0:
            raise InputError("dt must be > 0")
        self.scheme = scheme
        self.dt = float(dt)
        self.nsteps = int(nsteps)
        self.checkpoint = int(checkpoint)
        self.nr = system.n_rail
        self.track = system.track
        half = self.dt * np.arange(2 * self.nsteps + 1) / 2.0
        self.half_times = half
        self.cache = precompute_mass_inverses(system, half)
        self.rail_inv = np.ascontiguousarray(self.cache.rail_inv)
        self.rail_force = np.ascontiguousarray(system.rail_force(half))
        self.delta_mass = np.ascontiguousarray(self.cache.rail_mass - system.track.M_rail)
        self.set_bridge(system)

    @property
    def n(self):
        return self.K.shape[0]

    def set_bridge(self, system):
        """Adopt the (possibly damaged/reduced) matrices of ``system``."""
        nr = self.nr
        self.system = system
        self.K = np.ascontiguousarray(system.K)
        self.C = np.ascontiguousarray(system.C)
        self.M_bridge = system.M_bridge
        n = self.K.shape[0]
        if self.scheme == "rk4":
            self.W_bridge = np.linalg.inv(system.M_bridge)
            self.W_bridge = 0.5 * (self.W_bridge + self.W_bridge.T)
            KC = np.hstack([self.K, self.C])
            self.Sr = np.ascontiguousarray(KC[:nr])
            self.B = np.ascontiguousarray(self.W_bridge @ KC[nr:])
        else:
            h = self.dt
            A, A2 = kernels.RADAU_A, kernels.RADAU_A2
            M0 = system.M_const
            S0 = np.empty((2 * n, 2 * n))
            for i in range(2):
                for j in range(2):
                    blk = h * A[i, j] * self.C + h * h * A2[i, j] * self.K
                    if i == j:
                        blk = blk + M0
                    S0[i * n:(i + 1) * n, j * n:(j + 1) * n] = blk
            try:
                Sinv = np.linalg.inv(S0)
            except np.linalg.LinAlgError as exc:
                raise StepFailureError(f"singular Radau stage matrix: {exc}") from exc
            E = np.concatenate([np.arange(nr), n + np.arange(nr)])
            self.Sinv = np.ascontiguousarray(Sinv)
            self.Z = np.ascontiguousarray(Sinv[:, E])
            self.G = np.ascontiguousarray(Sinv[np.ix_(E, E)])
            SinvT = np.ascontiguousarray(Sinv.T)
            self.SinvT = SinvT
            self.ZT = np.ascontiguousarray(SinvT[:, E])
            self.GT = np.ascontiguousarray(SinvT[np.ix_(E, E)])
            b, ba, c = kernels.RADAU_B, kernels.RADAU_BA, kernels.RADAU_C
            self.coef = np.array([c[0], c[1], b[0], b[1], ba[0], ba[1]])

    def forward(self, X0, g0, nsteps, obs):
        """Advance ``nsteps`` from global step ``g0``; returns (X_end, observed, checkpoints)."""
        if g0 < 0 or g0 + nsteps > self.nsteps:
            raise InputError("sweep outside the precomputed grid")
        X0 = np.ascontiguousarray(X0, dtype=float)
        obs = np.ascontiguousarray(obs, dtype=np.int64)
        if self.scheme == "rk4":
            X, out, ck = kernels.rk4_forward(X0, self.Sr, self.B, self.rail_inv, self.rail_force,
                                             self.dt, g0, nsteps, obs, self.checkpoint)
        else:
            X, out, ck = kernels.radau_forward(X0, self.K, self.C, self.Sinv, self.Z, self.G,
                                               self.delta_mass, self.rail_force, self.dt, g0,
                                               nsteps, obs, self.checkpoint, self.coef)
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(out))):
            raise InstabilityError(
                f"non-finite state in {self.scheme} sweep (dt={self.dt}); reduce the timestep")
        return X, out, ck

    def backward(self, ck, seeds, g0, nsteps, obs, lam_end=None, want_cm=False):
        """Adjoint sweep; returns ``(dL/dX0, G_K, G_C, G_M)`` on the bridge block."""
        lam_end = np.zeros(2 * self.n) if lam_end is None else np.ascontiguousarray(lam_end, float)
        seeds = np.ascontiguousarray(seeds, dtype=float)
        obs = np.ascontiguousarray(obs, dtype=np.int64)
        if self.scheme == "rk4":
            lam, Pu, Pv, Pa = kernels.rk4_backward(ck, seeds, lam_end, self.Sr, self.B,
                                                   self.rail_inv, self.rail_force, self.dt, g0,
                                                   nsteps, obs, self.checkpoint, want_cm)
            W = self.W_bridge
            return lam, -W @ Pu, -W @ Pv, -W @ Pa
        lam, Pu, Pv, Pa = kernels.radau_backward(
            ck, seeds, lam_end, self.K, self.C, self.Sinv, self.Z, self.G, self.SinvT, self.ZT,
            self.GT, self.delta_mass, self.rail_force, self.dt, g0, nsteps, obs, self.checkpoint,
            self.coef, kernels.RADAU_A, kernels.RADAU_A2, want_cm)
        return lam, -Pu, -Pv, -Pa


def n_steps_for(duration, dt):
    """Number of steps so that the grid has ``floor(duration/dt) + 1`` samples."""
    return int(math.floor(duration / dt + 1e-9))


def simulate(system, scheme, dt, duration, initial=None, accelerations=False,
             checkpoint=DEFAULT_CHECKPOINT):
    """Deterministic trajectory of the coupled system from ``initial`` (default zero)."""
    nsteps = n_steps_for(duration, dt)
    if nsteps < 1:
        raise InputError("duration shorter than one timestep")
    prop = Propagator(system, dt, nsteps, scheme, checkpoint)
    return simulate_with(prop, initial, accelerations)


def simulate_with(prop, initial=None, accelerations=False):
    n2 = 2 * prop.n
    X0 = np.zeros(n2) if initial is None else np.asarray(initial, dtype=float)
    if X0.shape != (n2,):
        raise InputError(f"initial state must have length {n2}")
    _, out, _ = prop.forward(X0, 0, prop.nsteps, np.arange(n2))
    states = np.vstack([X0[None, :], out])
    t = prop.dt * np.arange(prop.nsteps + 1)
    acc = finite_difference_acceleration(states[:, prop.n:], prop.dt) if accelerations else None
    return Trajectory(t, states, acc)


# -- CSV export -------------------------------------------------------------

def write_trajectory_csv(path, timestamps, disp, vel, dof_ids):
    """Write ``t, dof_<id>_disp..., dof_<id>_vel...`` with round-trip float formatting."""
    header = ["t"] + [f"dof_{d}_disp" for d in dof_ids] + [f"dof_{d}_vel" for d in dof_ids]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(timestamps)):
            row = [repr(float(timestamps[i]))]
            row += [repr(float(x)) for x in disp[i]]
            row += [repr(float(x)) for x in vel[i]]
            w.writerow(row)


def read_trajectory_csv(path):
    """Inverse of :func:`write_trajectory_csv`: ``(t, disp, vel, dof_ids)``."""
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        try:
            header = next(r)
        except StopIteration:
            raise InputError("empty trajectory file", source=path) from None
        rows = []
        for lineno, row in enumerate(r, start=2):
            if not row:
                continue
            try:
                rows.append([float(x) for x in row])
            except ValueError:
                raise InputError("non-numeric value", source=path, line=lineno) from None
            if len(rows[-1]) != len(header):
                raise InputError(f"expected {len(header)} columns, got {len(row)}",
                                 source=path, line=lineno)
    if not header or header[0].strip() != "t":
        raise InputError("first column must be 't'", source=path, line=1)
    cols = [h.strip() for h in header[1:]]
    if len(cols) % 2:
        raise InputError("expected matching disp/vel column pairs", source=path, line=1)
    nd = len(cols) // 2
    ids = []
    for j, name in enumerate(cols[:nd]):
        if not (name.startswith("dof_") and name.endswith("_disp")):
            raise InputError(f"bad column name {name!r}", source=path, line=1)
        ids.append(name[4:-5])
        if cols[nd + j] != f"dof_{ids[-1]}_vel":
            raise InputError(f"velocity column for dof {ids[-1]} missing", source=path, line=1)
    data = np.array(rows, dtype=float).reshape(len(rows), 1 + 2 * nd)
    return data[:, 0], data[:, 1:1 + nd], data[:, 1 + nd:], ids


def lti_reference(system, dt, duration, initial=None):
    """Unforced LTI trajectory by exact matrix-exponential stepping (reference for checks)."""
    n = system.size
    W = np.linalg.inv(system.M_const)
    J = np.block([[np.zeros((n, n)), np.eye(n)], [-W @ system.K, -W @ system.C]])
    nsteps = n_steps_for(duration, dt)
    Phi = scipy.linalg.expm(J * dt)
    X = np.zeros(2 * n) if initial is None else np.asarray(initial, float).copy()
    states = [X.copy()]
    for s in range(nsteps):
        X = Phi @ X
        states.append(X.copy())
    return np.array(states)
