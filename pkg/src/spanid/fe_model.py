"""Finite-element description of the bridge.

Members are bars or (plane/space) frame elements. A model keeps every member's
globally placed stiffness contribution so the damaged stiffness is a cheap
weighted sum ``K(k) = sum_i k_i K_i``. Rotational DOFs, when present, are
removed by static condensation before anything downstream sees the matrices.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import (
    ConstraintViolationError,
    DegenerateGeometryError,
    IllPosedCondensationError,
    InputError,
    MappingError,
    SingularCoefficientError,
)

logger = logging.getLogger(__name__)

MIN_DEVIATION_RATIO = 0.01
AXES = ("x", "y", "z")
MEMBER_KINDS = ("bar", "plane-frame", "space-frame")


@dataclass(frozen=True)
class Node:
    id: int
    position: tuple
    support: tuple = ()  # per translational DOF, True = fixed

    @property
    def ndim(self):
        return len(self.position)

    def fixed(self, axis):
        return bool(self.support[axis]) if axis < len(self.support) else False


@dataclass(frozen=True)
class Member:
    id: int
    node_i: int
    node_j: int
    elastic_modulus: float
    area: float
    density: float
    second_moment: object = 0.0  # float, or (Iy, Iz) for space frames
    kind: str = "bar"
    torsion_constant: float | None = None
    poisson_ratio: float = 0.3
    group: str = ""

    def __post_init__(self):
        if self.node_i == self.node_j:
            raise DegenerateGeometryError(f"member {self.id}: node_i == node_j")
        if self.kind not in MEMBER_KINDS:
            raise InputError(f"member {self.id}: unknown kind {self.kind!r}")
        props = [self.elastic_modulus, self.area, self.density]
        if self.kind != "bar":
            props.extend(np.atleast_1d(self.second_moment).tolist())
        if min(props) <= 0:
            raise InputError(f"member {self.id}: section properties must be > 0")


def _direction(xi, xj, member_id=None):
    d = np.asarray(xj, float) - np.asarray(xi, float)
    length = float(np.linalg.norm(d))
    if length <= 1e-12:
        raise DegenerateGeometryError(f"member {member_id}: zero length")
    return d / length, length


def _bar_matrices(m, e, length, lumped):
    ea_l = m.elastic_modulus * m.area / length
    outer = np.outer(e, e)
    k = ea_l * np.block([[outer, -outer], [-outer, outer]])
    nd = len(e)
    mass = m.density * m.area * length
    eye = np.eye(nd)
    if lumped:
        mm = 0.5 * mass * np.eye(2 * nd)
    else:
        mm = mass / 6.0 * np.block([[2 * eye, eye], [eye, 2 * eye]])
    return k, mm


def _plane_frame_matrices(m, e, length, lumped):
    E, A, I, rho, L = m.elastic_modulus, m.area, float(m.second_moment), m.density, length
    a = E * A / L
    b = E * I / L**3
    kl = np.array([
        [a, 0, 0, -a, 0, 0],
        [0, 12 * b, 6 * b * L, 0, -12 * b, 6 * b * L],
        [0, 6 * b * L, 4 * b * L**2, 0, -6 * b * L, 2 * b * L**2],
        [-a, 0, 0, a, 0, 0],
        [0, -12 * b, -6 * b * L, 0, 12 * b, -6 * b * L],
        [0, 6 * b * L, 2 * b * L**2, 0, -6 * b * L, 4 * b * L**2],
    ])
    mass = rho * A * L
    if lumped:
        ml = np.diag([0.5, 0.5, 0.0, 0.5, 0.5, 0.0]) * mass
    else:
        ml = mass / 420.0 * np.array([
            [140, 0, 0, 70, 0, 0],
            [0, 156, 22 * L, 0, 54, -13 * L],
            [0, 22 * L, 4 * L**2, 0, 13 * L, -3 * L**2],
            [70, 0, 0, 140, 0, 0],
            [0, 54, 13 * L, 0, 156, -22 * L],
            [0, -13 * L, -3 * L**2, 0, -22 * L, 4 * L**2],
        ])
    c, s = e
    lam = np.array([[c, s, 0], [-s, c, 0], [0, 0, 1.0]])
    t = scipy.linalg.block_diag(lam, lam)
    return t.T @ kl @ t, t.T @ ml @ t


def _space_frame_matrices(m, e, length, lumped):
    E, A, rho, L = m.elastic_modulus, m.area, m.density, length
    iy, iz = (np.broadcast_to(np.atleast_1d(m.second_moment), (2,))).astype(float)
    J = m.torsion_constant if m.torsion_constant is not None else iy + iz
    G = E / (2.0 * (1.0 + m.poisson_ratio))
    kl = np.zeros((12, 12))
    kl[np.ix_([0, 6], [0, 6])] = E * A / L * np.array([[1, -1], [-1, 1]])
    kl[np.ix_([3, 9], [3, 9])] = G * J / L * np.array([[1, -1], [-1, 1]])

    def bend(ei, sgn):
        return ei / L**3 * np.array([
            [12, sgn * 6 * L, -12, sgn * 6 * L],
            [sgn * 6 * L, 4 * L**2, -sgn * 6 * L, 2 * L**2],
            [-12, -sgn * 6 * L, 12, -sgn * 6 * L],
            [sgn * 6 * L, 2 * L**2, -sgn * 6 * L, 4 * L**2],
        ])

    def bend_mass(mass, sgn):
        return mass / 420.0 * np.array([
            [156, sgn * 22 * L, 54, -sgn * 13 * L],
            [sgn * 22 * L, 4 * L**2, sgn * 13 * L, -3 * L**2],
            [54, sgn * 13 * L, 156, -sgn * 22 * L],
            [-sgn * 13 * L, -3 * L**2, -sgn * 22 * L, 4 * L**2],
        ])

    vz = [1, 5, 7, 11]  # v, theta_z
    wy = [2, 4, 8, 10]  # w, theta_y
    kl[np.ix_(vz, vz)] = bend(E * iz, 1.0)
    kl[np.ix_(wy, wy)] = bend(E * iy, -1.0)
    mass = rho * A * L
    if lumped:
        ml = np.diag([0.5, 0.5, 0.5, 0, 0, 0] * 2) * mass
    else:
        ml = np.zeros((12, 12))
        ml[np.ix_([0, 6], [0, 6])] = mass / 6.0 * np.array([[2, 1], [1, 2]])
        ml[np.ix_([3, 9], [3, 9])] = rho * J * L / 6.0 * np.array([[2, 1], [1, 2]])
        ml[np.ix_(vz, vz)] = bend_mass(mass, 1.0)
        ml[np.ix_(wy, wy)] = bend_mass(mass, -1.0)
    ref = np.array([0.0, 0.0, 1.0])
    if abs(e @ ref) > 0.99:
        ref = np.array([0.0, 1.0, 0.0])
    ey = np.cross(ref, e)
    ey /= np.linalg.norm(ey)
    ez = np.cross(e, ey)
    lam = np.vstack([e, ey, ez])
    t = scipy.linalg.block_diag(lam, lam, lam, lam)
    return t.T @ kl @ t, t.T @ ml @ t


def member_matrices(member, nodes, lumped=False):
    """Element stiffness and mass in global coordinates.

    ``nodes`` maps node id to a :class:`Node` (or anything with ``position``).
    Bars return ``2*ndim`` square matrices; plane frames 6x6 ordered
    ``(ux, uy, rz)`` per node; space frames 12x12 ordered
    ``(ux, uy, uz, rx, ry, rz)`` per node.
    """
    xi = nodes[member.node_i].position
    xj = nodes[member.node_j].position
    e, length = _direction(xi, xj, member.id)
    if member.kind == "bar":
        return _bar_matrices(member, e, length, lumped)
    if member.kind == "plane-frame":
        if len(e) != 2:
            raise InputError(f"member {member.id}: plane-frame needs 2D nodes")
        return _plane_frame_matrices(member, e, length, lumped)
    if len(e) != 3:
        raise InputError(f"member {member.id}: space-frame needs 3D nodes")
    return _space_frame_matrices(member, e, length, lumped)


def member_length(member, nodes):
    return _direction(nodes[member.node_i].position, nodes[member.node_j].position, member.id)[1]


@dataclass(frozen=True)
class SystemMatrices:
    mass: np.ndarray
    damping: np.ndarray
    stiffness: np.ndarray

    @property
    def size(self):
        return self.stiffness.shape[0]


@dataclass(frozen=True)
class DampingSpec:
    ratio: float = 0.02
    modes: tuple = (1, 2)
    omega_a: float | None = None
    omega_b: float | None = None


def check_deviation_ratios(k, n_members):
    k = np.asarray(k, dtype=float)
    if k.shape != (n_members,):
        raise ConstraintViolationError(f"expected {n_members} deviation ratios, got shape {k.shape}")
    if not np.all(np.isfinite(k)):
        raise ConstraintViolationError("deviation ratios must be finite")
    bad = np.flatnonzero(k < MIN_DEVIATION_RATIO)
    if bad.size:
        raise ConstraintViolationError(
            f"deviation ratios below {MIN_DEVIATION_RATIO} for members {bad.tolist()}"
        )
    return k


def static_condensation(K, slave, M=None, C=None):
    """Condense the ``slave`` DOFs out of ``K`` (and transform ``M``, ``C``).

    Returns ``(keep, T, matrices)`` where ``keep`` are the retained indices in
    original order, ``T`` maps retained to all DOFs, and ``matrices`` is a
    :class:`SystemMatrices` with ``X_cond = T.T @ X @ T`` (``K_cond`` equals
    ``K_tt - K_tr K_rr^-1 K_rt``). Missing ``M``/``C`` come back as zeros.
    """
    K = np.asarray(K, dtype=float)
    n = K.shape[0]
    slave = np.unique(np.asarray(slave, dtype=int))
    keep = np.setdiff1d(np.arange(n), slave)
    T = condensation_transform(K, keep, slave)
    zero = np.zeros_like(K)
    out = []
    for X in (M if M is not None else zero, C if C is not None else zero, K):
        Xr = T.T @ X @ T
        out.append(0.5 * (Xr + Xr.T))
    return keep, T, SystemMatrices(*out)


def condensation_transform(K, keep, slave):
    """``T`` with identity on ``keep`` rows and ``-K_ss^-1 K_sk`` on ``slave`` rows."""
    n = K.shape[0]
    T = np.zeros((n, len(keep)))
    T[keep, np.arange(len(keep))] = 1.0
    if len(slave):
        kss = K[np.ix_(slave, slave)]
        ksk = K[np.ix_(slave, keep)]
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
                lu = scipy.linalg.lu_factor(kss, check_finite=True)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise IllPosedCondensationError(str(exc)) from exc
        if np.min(np.abs(np.diag(lu[0]))) <= 1e-13 * np.max(np.abs(kss)):
            raise IllPosedCondensationError("condensed block is singular")
        T[slave] = -scipy.linalg.lu_solve(lu, ksk)
    return T


def rayleigh_damping(M, K, ratio, omega_a, omega_b):
    """``C = alpha M + beta K`` with damping ``ratio`` at ``omega_a`` and ``omega_b``."""
    if ratio < 0:
        raise ValueError("damping ratio must be >= 0")
    if not (omega_a > 0 and omega_b > 0):
        raise ValueError("anchor frequencies must be positive")
    if np.isclose(omega_a, omega_b, rtol=1e-12, atol=0.0):
        raise SingularCoefficientError("Rayleigh anchors coincide")
    alpha, beta = rayleigh_coefficients(ratio, omega_a, omega_b)
    C = alpha * np.asarray(M) + beta * np.asarray(K)
    return 0.5 * (C + C.T)


def rayleigh_coefficients(ratio, omega_a, omega_b):
    a = np.array([[1.0 / omega_a, omega_a], [1.0 / omega_b, omega_b]]) * 0.5
    try:
        alpha, beta = np.linalg.solve(a, [ratio, ratio])
    except np.linalg.LinAlgError as exc:
        raise SingularCoefficientError(str(exc)) from exc
    return float(alpha), float(beta)


def natural_frequencies(M, K):
    """Sorted natural circular frequencies (rad/s) of ``K x = w^2 M x``."""
    w2 = scipy.linalg.eigh(K, M, eigvals_only=True)
    return np.sqrt(np.clip(w2, 0.0, None))


class BridgeModel:
    """Undamaged FE model with per-member stiffness contributions.

    Internally every matrix lives on the *full free* DOF set: unsupported
    translations plus rotations of frame-connected nodes. ``trans`` indexes the
    translational subset; everything exposed through :meth:`assemble` and
    :attr:`dof_map` is on that condensed translational set, numbered 0..m-1.
    """

    def __init__(self, nodes, members, lumped_mass=False, nodal_masses=None,
                 damping=None, name="bridge", track=None, reduction=None, extra=None):
        self.name = name
        self.nodes = {n.id: n for n in nodes}
        ids = sorted(self.nodes)
        if ids != list(range(len(ids))):
            raise InputError("node ids must be unique and contiguous from 0")
        self.members = list(members)
        if sorted(m.id for m in self.members) != list(range(len(self.members))):
            raise InputError("member ids must be unique and contiguous from 0")
        self.members.sort(key=lambda m: m.id)
        for m in self.members:
            for nid in (m.node_i, m.node_j):
                if nid not in self.nodes:
                    raise InputError(f"member {m.id} references unknown node {nid}")
        dims = {n.ndim for n in nodes}
        if len(dims) != 1 or dims.pop() not in (2, 3):
            raise InputError("all node positions must have 2 or 3 components")
        self.ndim = nodes[0].ndim
        self.lumped_mass = lumped_mass
        self.nodal_masses = dict(nodal_masses or {})
        self.damping_spec = damping or DampingSpec()
        self.track = track
        self.reduction = reduction
        self.extra = dict(extra or {})
        self._check_connected()
        self._number_dofs()
        self._assemble_members()
        self._condense_and_damp()

    # -- construction -------------------------------------------------------
    def _check_connected(self):
        parent = list(range(len(self.nodes)))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for m in self.members:
            parent[find(m.node_i)] = find(m.node_j)
        roots = {find(i) for i in range(len(self.nodes))}
        if len(roots) != 1:
            raise InputError("model connectivity graph is not a single component")

    def _number_dofs(self):
        nd = self.ndim
        nrot = 1 if nd == 2 else 3
        framed = set()
        for m in self.members:
            if m.kind != "bar":
                framed.update((m.node_i, m.node_j))
        # node -> list of full DOF numbers (-1 for supported translations)
        self._node_dofs = {}
        trans, rot = [], []
        count = 0
        for nid in sorted(self.nodes):
            node = self.nodes[nid]
            dofs = []
            for ax in range(nd):
                if node.fixed(ax):
                    dofs.append(-1)
                else:
                    dofs.append(count)
                    trans.append(count)
                    count += 1
            if nid in framed:
                for _ in range(nrot):
                    dofs.append(count)
                    rot.append(count)
                    count += 1
            self._node_dofs[nid] = dofs
        self.n_full = count
        self.trans = np.array(trans, dtype=int)
        self.rot = np.array(rot, dtype=int)
        full_to_trans = -np.ones(count, dtype=int)
        full_to_trans[self.trans] = np.arange(len(trans))
        self._full_to_trans = full_to_trans
        # dof_map: (node, axis) -> translational free index
        self.dof_map = {}
        for nid, dofs in self._node_dofs.items():
            for ax in range(nd):
                if dofs[ax] >= 0:
                    self.dof_map[(nid, ax)] = int(full_to_trans[dofs[ax]])
        self.dof_labels = [None] * len(trans)
        for (nid, ax), idx in self.dof_map.items():
            self.dof_labels[idx] = (nid, ax)

    def _element_dofs(self, member):
        nd = self.ndim
        di = self._node_dofs[member.node_i]
        dj = self._node_dofs[member.node_j]
        if member.kind == "bar":
            return np.array(di[:nd] + dj[:nd], dtype=int)
        return np.array(di + dj, dtype=int)

    def _assemble_members(self):
        n = self.n_full
        self.stiffness_stack = np.zeros((len(self.members), n, n))
        M = np.zeros((n, n))
        self.member_lengths = np.zeros(len(self.members))
        self._elem = []
        for i, m in enumerate(self.members):
            ke, me = member_matrices(m, self.nodes, lumped=self.lumped_mass)
            dofs = self._element_dofs(m)
            ok = dofs >= 0
            idx = dofs[ok]
            self.stiffness_stack[i][np.ix_(idx, idx)] += ke[np.ix_(ok, ok)]
            M[np.ix_(idx, idx)] += me[np.ix_(ok, ok)]
            self.member_lengths[i] = member_length(m, self.nodes)
            self._elem.append((idx, ke[np.ix_(ok, ok)]))
        for nid, mass in self.nodal_masses.items():
            for ax in range(self.ndim):
                d = self._node_dofs[nid][ax]
                if d >= 0:
                    M[d, d] += mass
        self.mass_full = 0.5 * (M + M.T)
        self._flat_stack = self.stiffness_stack.reshape(len(self.members), -1)

    def _condense_and_damp(self):
        K1 = self.stiffness_full(np.ones(self.n_members))
        ds = self.damping_spec
        Mt, _, Kt = self.condense(self.mass_full, None, K1)
        if ds.omega_a is not None and ds.omega_b is not None:
            wa, wb = ds.omega_a, ds.omega_b
        else:
            w = natural_frequencies(Mt, Kt)
            wa, wb = w[ds.modes[0] - 1], w[ds.modes[1] - 1]
        self.rayleigh = rayleigh_coefficients(ds.ratio, wa, wb) if ds.ratio > 0 else (0.0, 0.0)
        self.rayleigh_anchors = (float(wa), float(wb))
        alpha, beta = self.rayleigh
        self.damping_full = alpha * self.mass_full + beta * K1

    # -- queries ------------------------------------------------------------
    @property
    def n_members(self):
        return len(self.members)

    @property
    def n_dofs(self):
        """Number of free translational DOFs (``m``)."""
        return len(self.trans)

    def dof_index(self, node, axis):
        """Translational free-DOF index of ``node`` along ``axis`` (0/1/2 or 'x'/'y'/'z')."""
        if isinstance(axis, str):
            axis = AXES.index(axis.lower())
        try:
            return self.dof_map[(int(node), int(axis))]
        except KeyError:
            raise MappingError(f"node {node} axis {AXES[axis]} is fixed or does not exist") from None

    def stiffness_full(self, k):
        """``sum_i k_i K_i`` on the full free DOF set (rotations included)."""
        K = np.tensordot(np.asarray(k, dtype=float), self.stiffness_stack, axes=1)
        return 0.5 * (K + K.T)

    def contract_stiffness_gradient(self, Kbar):
        """``[<Kbar, K_i>]_i``: pull a full-level stiffness sensitivity back onto members."""
        return self._flat_stack @ np.asarray(Kbar).reshape(-1)

    def condense(self, M, C, K):
        """Static condensation of rotations; identity for pure bar models."""
        if len(self.rot) == 0:
            zero = np.zeros_like(K)
            return (M if M is not None else zero), (C if C is not None else zero), K
        _, _, mats = static_condensation(K, self.rot, M, C)
        return mats.mass, mats.damping, mats.stiffness

    def assemble(self, k):
        """Damaged :class:`SystemMatrices` on the translational DOF set."""
        k = check_deviation_ratios(k, self.n_members)
        M, C, K = self.condense(self.mass_full, self.damping_full, self.stiffness_full(k))
        return SystemMatrices(M, C, K)

    def member_axial_forces(self, u_trans, k=None):
        """Axial force (tension positive) in every member for translational displacements."""
        k = np.ones(self.n_members) if k is None else np.asarray(k, float)
        u_full = np.zeros(self.n_full)
        u_full[self.trans] = u_trans
        if len(self.rot):
            K = self.stiffness_full(k)
            _, T, _ = static_condensation(K, self.rot)
            u_full = T @ np.asarray(u_trans)
        out = np.zeros(self.n_members)
        for i, m in enumerate(self.members):
            e, L = _direction(self.nodes[m.node_i].position, self.nodes[m.node_j].position, m.id)
            ui = self._node_disp(m.node_i, u_full)
            uj = self._node_disp(m.node_j, u_full)
            out[i] = k[i] * m.elastic_modulus * m.area / L * (e @ (uj - ui))
        return out

    def _node_disp(self, nid, u_full):
        d = self._node_dofs[nid][: self.ndim]
        return np.array([u_full[j] if j >= 0 else 0.0 for j in d])

    def node_positions(self):
        return np.array([self.nodes[i].position for i in sorted(self.nodes)], dtype=float)


def member_matrices_global(model, member_id):
    """Member ``i``'s stiffness placed on the translational DOF set (bar models)."""
    K = model.stiffness_stack[member_id]
    return K[np.ix_(model.trans, model.trans)]


def assemble_global(model, k):
    """Damaged system matrices; mass and damping do not depend on ``k``."""
    return model.assemble(k)


@dataclass
class ModelSummary:
    n_nodes: int
    n_members: int
    n_dofs: int
    f_min_hz: float
    f_max_hz: float
    extra: dict = field(default_factory=dict)


def summarize(model):
    mats = model.assemble(np.ones(model.n_members))
    w = natural_frequencies(mats.mass, mats.stiffness)
    return ModelSummary(len(model.nodes), model.n_members, model.n_dofs,
                        w[0] / (2 * np.pi), w[-1] / (2 * np.pi))
