"""Exact gradients of trajectory losses with respect to the deviation ratios.

:class:`ResponseModel` owns one crossing: the (optionally Guyan-reduced)
bridge coupled to the rails, a :class:`~spanid.integrate.Propagator` on a
fixed grid, and the observation map. For a batch of steps it returns the
loss and ``dL/dk`` by a discrete adjoint sweep, then pulls the bridge-level
sensitivities back through the reduction and onto the members.

Batches hand their final state to the next batch as a constant
(truncated backpropagation through time).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .coupling import build_track, couple_matrices
from .errors import GradientCheckError, InputError, ProfileError
from .fe_model import MIN_DEVIATION_RATIO, check_deviation_ratios
from .integrate import Propagator, n_steps_for
from .reduction import (
    MasterSlavePartition,
    guyan_transform,
    reduce_system,
    reduced_layers,
    transform_vjp,
)

logger = logging.getLogger(__name__)

VERIFY_STEP = 2e-3  # relative FD step used by the verification command (halved once for extrapolation)
ERROR_FLOOR = 1e-5
TOLERANCE = {"rk4": 1e-5, "radau": 1e-4}


@dataclass(frozen=True)
class ScalingProfile:
    """Per-member positive gradient multipliers."""

    s: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float)
        if s.ndim != 1 or np.any(~np.isfinite(s)) or np.any(s <= 0):
            raise ProfileError("gradient scales must be finite and > 0")
        object.__setattr__(self, "s", s)

    @classmethod
    def ones(cls, n):
        return cls(np.ones(n))

    @classmethod
    def with_members(cls, n, members, value):
        s = np.ones(n)
        s[np.asarray(list(members), dtype=int)] = value
        return cls(s)


def scale_gradients(g, profile):
    """``s_i * g_i``."""
    s = profile.s if isinstance(profile, ScalingProfile) else np.asarray(profile, float)
    g = np.asarray(g, dtype=float)
    if s.shape != g.shape:
        raise ProfileError(f"scaling profile has {s.size} entries, gradient has {g.size}")
    if np.any(s <= 0):
        raise ProfileError("gradient scales must be > 0")
    return g * s


def full_partition(model, masters=None):
    """Partition of the model's full DOF set; ``masters`` are translational indices.

    Rotations are always slaves. ``masters=None`` keeps every translation.
    """
    if masters is None:
        master_full = model.trans
    else:
        masters = np.asarray(masters, dtype=int)
        if np.any(masters < 0) or np.any(masters >= model.n_dofs):
            raise InputError("master DOF out of range")
        master_full = model.trans[np.sort(masters)]
    return MasterSlavePartition.from_masters(master_full, model.n_full)


def model_masters(model, extra=()):
    """Rail-level DOFs plus the model file's listed masters plus ``extra`` (translational)."""
    out = set(int(i) for i in extra)
    spec = model.reduction
    if model.track is not None and (spec is None or spec.auto_rail_level):
        out.update(int(i) for i in model.track.rail_level_dofs())
    if spec is not None:
        out.update(model.dof_map[p] for p in spec.master_dofs)
    return np.array(sorted(out), dtype=int)


class ResponseModel:
    """Simulate a crossing over the damaged bridge and differentiate it.

    Parameters
    ----------
    model : BridgeModel
        Must carry a track layout (``model.track``).
    trains : sequence of TrainConfig
    scheme : ``"rk4"`` or ``"radau"``
    dt, nsteps : grid
    masters : translational DOF indices kept by Guyan reduction, or ``None``
        for the unreduced model.
    observed : translational DOF indices whose displacements are observed;
        they must be masters.
    """

    def __init__(self, model, trains, scheme, dt, nsteps, masters=None, observed=None,
                 checkpoint=64, freeze_transform=False):
        if model.track is None:
            raise InputError("bridge model has no track definition")
        self.model = model
        self.trains = tuple(trains)
        self.scheme = scheme
        self.dt = float(dt)
        self.nsteps = int(nsteps)
        self.freeze_transform = freeze_transform
        self.partition = full_partition(model, masters)
        self.reduced = masters is not None or len(model.rot) > 0
        # translational index of each master, in master order
        full_to_trans = -np.ones(model.n_full, dtype=int)
        full_to_trans[model.trans] = np.arange(model.n_dofs)
        self.master_trans = full_to_trans[self.partition.master]
        pos = -np.ones(model.n_dofs, dtype=int)
        pos[self.master_trans] = np.arange(len(self.master_trans))
        self._master_pos = pos
        tl = model.track
        layers = tl.layers
        if self.reduced:
            trans_part = MasterSlavePartition.from_masters(self.master_trans, model.n_dofs)
            layers = reduced_layers(layers, trans_part)
        self.track = build_track(tl.rails, layers, len(self.master_trans))
        self.nr = self.track.n_rail
        self.n = self.nr + len(self.master_trans)
        observed = self.master_trans if observed is None else np.asarray(observed, dtype=int)
        op = pos[observed]
        if np.any(op < 0):
            raise InputError(f"observed DOFs {observed[op < 0].tolist()} are not retained masters")
        self.observed = observed
        self.obs_disp = self.nr + op
        self.obs_vel = self.obs_disp + self.n
        self.obs = np.concatenate([self.obs_disp, self.obs_vel])
        self.k = None
        self.transform = None
        self.set_k(np.ones(model.n_members), build=True, checkpoint=checkpoint)

    @classmethod
    def for_duration(cls, model, trains, scheme, dt, duration, **kw):
        return cls(model, trains, scheme, dt, n_steps_for(duration, dt), **kw)

    @property
    def times(self):
        return self.dt * np.arange(self.nsteps + 1)

    def bridge_matrices(self, k):
        """Reduced (or condensed) bridge matrices and the transform for ``k``."""
        m = self.model
        Kf = m.stiffness_full(k)
        if not self.reduced:
            return m.mass_full, m.damping_full, Kf, None
        tr = guyan_transform(Kf, self.partition)
        red = reduce_system(m.mass_full, m.damping_full, Kf, tr)
        return red.mass, red.damping, red.stiffness, tr

    def set_k(self, k, build=False, checkpoint=64):
        k = check_deviation_ratios(k, self.model.n_members)
        Mb, Cb, Kb, tr = self.bridge_matrices(k)
        system = couple_matrices(self.track, Mb, Cb, Kb, self.trains,
                                 bridge_dofs=self.master_trans)
        if build:
            self.prop = Propagator(system, self.dt, self.nsteps, self.scheme, checkpoint)
        else:
            self.prop.set_bridge(system)
        self.system = system
        self.k = k.copy()
        self.transform = tr
        self._Kfull = self.model.stiffness_full(k) if tr is not None else None

    # -- sweeps -----------------------------------------------------------------
    def zero_state(self):
        return np.zeros(2 * self.n)

    def forward(self, X0, g0, nsteps):
        """Observed displacements and velocities after each step of the batch."""
        X, out, ck = self.prop.forward(X0, g0, nsteps, self.obs)
        no = len(self.obs_disp)
        return X, out[:, :no], out[:, no:], ck

    def simulate(self, X0=None):
        """Full-grid observed response (rows 0..nsteps, row 0 = initial state)."""
        X0 = self.zero_state() if X0 is None else X0
        _, D, V, _ = self.forward(X0, 0, self.nsteps)
        D = np.vstack([X0[self.obs_disp][None], D])
        V = np.vstack([X0[self.obs_vel][None], V])
        return D, V

    def simulate_states(self, X0=None):
        X0 = self.zero_state() if X0 is None else X0
        _, out, _ = self.prop.forward(X0, 0, self.nsteps, np.arange(2 * self.n))
        return np.vstack([X0[None], out])

    def member_gradient(self, GM, GC, GK):
        """Pull bridge-level sensitivities back to ``dL/dk``."""
        sym = lambda G: 0.5 * (G + G.T)  # noqa: E731
        GK, GC, GM = sym(GK), sym(GC), sym(GM)
        if self.transform is None:
            Kbar = GK
        else:
            m = self.model
            Kbar = transform_vjp(self.transform, m.mass_full, m.damping_full, self._Kfull,
                                 GM, GC, GK, freeze_transform=self.freeze_transform)
        return self.model.contract_stiffness_gradient(Kbar)

    def batch_loss_grad(self, X0, g0, nsteps, loss_fn, want_grad=True):
        """Loss of one batch and its gradient in ``k`` (handoff state held constant).

        ``loss_fn(D, A)`` receives the observed displacements and first-order
        accelerations after each step and returns ``(value, dD, dA)``.
        Acceleration at the first step differences against ``X0``.
        """
        Xe, D, V, ck = self.forward(X0, g0, nsteps)
        v_prev = np.vstack([np.asarray(X0)[self.obs_vel][None], V[:-1]])
        A = (V - v_prev) / self.dt
        value, dD, dA = loss_fn(D, A)
        if not want_grad:
            return float(value), None, Xe
        seeds_v = np.zeros_like(V)
        if dA is not None:
            seeds_v += dA / self.dt
            seeds_v[:-1] -= dA[1:] / self.dt
        else:
            dA = np.zeros_like(V)
        seeds_d = np.zeros_like(D) if dD is None else dD
        seeds = np.hstack([seeds_d, seeds_v])
        _, GK, GC, GM = self.prop.backward(ck, seeds, g0, nsteps, self.obs,
                                           want_cm=self.transform is not None
                                           and not self.freeze_transform)
        return float(value), self.member_gradient(GM, GC, GK), Xe


def batch_bounds(nsteps, batch_count):
    """Contiguous ``(g0, length)`` segments covering ``nsteps`` steps."""
    if batch_count < 1:
        raise InputError("batch_count must be >= 1")
    batch_count = min(batch_count, nsteps)
    edges = np.linspace(0, nsteps, batch_count + 1).round().astype(int)
    return [(int(a), int(b - a)) for a, b in zip(edges[:-1], edges[1:])]


def trajectory_loss_gradient(response, k, loss_for_batch, batch_count=1, handoff=None):
    """Summed batch losses and exact (truncated-BPTT) gradient at ``k``.

    ``loss_for_batch(g0, n)`` returns the ``loss_fn`` of that batch.
    Returns ``(loss, grad, handoff_states)``; passing ``handoff`` pins the batch
    start states (used by the finite-difference oracle).
    """
    response.set_k(k)
    total, grad = 0.0, np.zeros(response.model.n_members)
    X = response.zero_state()
    starts = []
    for b, (g0, n) in enumerate(batch_bounds(response.nsteps, batch_count)):
        if handoff is not None:
            X = handoff[b]
        starts.append(X.copy())
        val, g, X = response.batch_loss_grad(X, g0, n, loss_for_batch(g0, n))
        total += val
        grad += g
    return total, grad, starts


def trajectory_loss(response, k, loss_for_batch, batch_count=1, handoff=None):
    response.set_k(k)
    total = 0.0
    X = response.zero_state()
    for b, (g0, n) in enumerate(batch_bounds(response.nsteps, batch_count)):
        if handoff is not None:
            X = handoff[b]
        val, _, X = response.batch_loss_grad(X, g0, n, loss_for_batch(g0, n), want_grad=False)
        total += val
    return total


def central_difference(f, k, h=1e-6, relative=True, floor=MIN_DEVIATION_RATIO, members=None,
                       extrapolate=False):
    """Central differences of scalar ``f`` at ``k``; steps are clipped at the floor.

    ``extrapolate`` combines steps ``h`` and ``h/2`` (Richardson) to cancel the
    ``h^2`` truncation term.
    """
    if extrapolate:
        g1 = central_difference(f, k, h, relative, floor, members)
        g2 = central_difference(f, k, h / 2, relative, floor, members)
        return (4.0 * g2 - g1) / 3.0
    k = np.asarray(k, dtype=float)
    idx = range(len(k)) if members is None else members
    g = np.zeros(len(k))
    for i in idx:
        step = h * max(abs(k[i]), 1.0) if relative else h
        lo = k[i] - step
        if lo < floor:
            warnings.warn(f"finite-difference step for member {i} clipped at the {floor} floor",
                          RuntimeWarning, stacklevel=2)
            lo = floor
        hi = k[i] + step
        kp, km = k.copy(), k.copy()
        kp[i], km[i] = hi, lo
        g[i] = (f(kp) - f(km)) / (hi - lo)
    return g


def finite_difference_gradient(response, k, loss_for_batch, batch_count=1, h=1e-6,
                               handoff=None, members=None, jobs=1, extrapolate=False):
    """FD oracle under the same handoff truncation as the adjoint."""
    if h <= 0:
        raise InputError("finite-difference step must be > 0")
    k = np.asarray(k, dtype=float)
    if handoff is None and batch_count > 1:
        _, _, handoff = trajectory_loss_gradient(response, k, loss_for_batch, batch_count)
    if jobs > 1:
        return _parallel_fd(response, k, loss_for_batch, batch_count, h, handoff, members, jobs,
                            extrapolate)
    f = lambda kk: trajectory_loss(response, kk, loss_for_batch, batch_count, handoff)  # noqa: E731
    g = central_difference(f, k, h, members=members, extrapolate=extrapolate)
    response.set_k(k)
    return g


def _fd_worker(args):
    response, k, loss_for_batch, batch_count, h, handoff, members, extrapolate = args
    f = lambda kk: trajectory_loss(response, kk, loss_for_batch, batch_count, handoff)  # noqa: E731
    return central_difference(f, k, h, members=members, extrapolate=extrapolate)


def _parallel_fd(response, k, loss_for_batch, batch_count, h, handoff, members, jobs,
                 extrapolate=False):
    import concurrent.futures as cf
    import multiprocessing as mp

    idx = list(range(len(k)) if members is None else members)
    chunks = [idx[i::jobs] for i in range(jobs) if idx[i::jobs]]
    ctx = mp.get_context("fork")
    with cf.ProcessPoolExecutor(len(chunks), mp_context=ctx) as ex:
        parts = list(ex.map(_fd_worker, [(response, k, loss_for_batch, batch_count, h, handoff, c,
                                          extrapolate) for c in chunks]))
    return np.sum(parts, axis=0)


def relative_errors(adjoint, fd, floor=ERROR_FLOOR):
    """Componentwise ``|a - f| / max(|f|, floor * max|f|)``.

    Components below ``floor`` times the largest are judged on that absolute
    scale: their difference quotients sit at the roundoff level of the sweep.
    """
    adjoint, fd = np.asarray(adjoint), np.asarray(fd)
    denom = np.maximum(np.abs(fd), floor * max(np.abs(fd).max(), 1e-300))
    return np.abs(adjoint - fd) / denom


def check_gradient(adjoint, fd, tol, floor=ERROR_FLOOR):
    err = relative_errors(adjoint, fd, floor)
    worst = int(np.argmax(err))
    if err[worst] >= tol:
        raise GradientCheckError(
            f"member {worst}: adjoint {adjoint[worst]:.6e} vs FD {fd[worst]:.6e} "
            f"(relative error {err[worst]:.2e} >= {tol:g})")
    return err
