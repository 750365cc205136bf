"""Guyan reduction of the (time-invariant) bridge and recoupling with the track.

The bridge is reduced on its own first; the moving-mass rail system is then
attached to the retained master DOFs exactly as in the unreduced coupling.
Since ``T`` depends on the damaged stiffness, :func:`transform_vjp` provides
the reverse-mode derivative of the whole reduction with respect to ``K``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .coupling import InteractionLayer, build_track, couple_matrices
from .errors import ReductionError
from .fe_model import SystemMatrices


@dataclass(frozen=True)
class MasterSlavePartition:
    master: np.ndarray
    slave: np.ndarray

    @classmethod
    def from_masters(cls, master, n):
        master = np.asarray(master, dtype=int)
        if len(np.unique(master)) != len(master):
            raise ReductionError("duplicate master DOFs")
        if np.any(master < 0) or np.any(master >= n):
            raise ReductionError("master DOF out of range")
        slave = np.setdiff1d(np.arange(n), master)
        return cls(master, slave)

    @property
    def n(self):
        return len(self.master) + len(self.slave)


@dataclass(frozen=True)
class GuyanTransform:
    """``u = T u_master``; rows in original DOF order, columns in master order."""

    T: np.ndarray
    partition: MasterSlavePartition
    lu: tuple | None = None  # LU of the slave-slave block, kept for the adjoint

    @property
    def slave_block(self):
        return self.T[self.partition.slave]


def guyan_transform(K, partition):
    K = np.asarray(K, dtype=float)
    master, slave = partition.master, partition.slave
    n, nm = partition.n, len(master)
    T = np.zeros((n, nm))
    T[master, np.arange(nm)] = 1.0
    lu = None
    if len(slave):
        kss = K[np.ix_(slave, slave)]
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
                lu = scipy.linalg.lu_factor(kss)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise ReductionError(f"slave block not invertible: {exc}") from exc
        piv = np.abs(np.diag(lu[0]))
        if piv.min() <= 1e-13 * piv.max():
            raise ReductionError("slave block K_B22 is singular")
        T[slave] = -scipy.linalg.lu_solve(lu, K[np.ix_(slave, master)])
    return GuyanTransform(T, partition, lu)


def _congruence(T, X):
    Xr = T.T @ X @ T
    return 0.5 * (Xr + Xr.T)


def reduce_system(M, C, K, transform):
    """``X^G = T^T X T`` for mass, damping and stiffness."""
    if len(transform.partition.slave) == 0 and np.array_equal(transform.partition.master,
                                                               np.arange(transform.partition.n)):
        return SystemMatrices(np.asarray(M), np.asarray(C), np.asarray(K))
    T = transform.T
    if T.shape[0] != K.shape[0]:
        raise ValueError("transform and matrices have inconsistent sizes")
    return SystemMatrices(_congruence(T, M), _congruence(T, C), _congruence(T, K))


def transform_vjp(transform, M, C, K, Gm, Gc, Gk, freeze_transform=False):
    """Pull ``dL/dM^G, dL/dC^G, dL/dK^G`` back to ``dL/dK`` (full size).

    ``M`` and ``C`` are treated as constants; only ``K`` enters ``T``. With
    ``freeze_transform`` the dependence of ``T`` on ``K`` is ignored.
    """
    T = transform.T
    Kbar = T @ Gk @ T.T
    if freeze_transform or len(transform.partition.slave) == 0:
        return Kbar
    Tbar = np.zeros_like(T)
    for X, G in ((M, Gm), (C, Gc), (K, Gk)):
        if G is None:
            continue
        Tbar += X @ (T @ (G + G.T))
    master, slave = transform.partition.master, transform.partition.slave
    Sbar = Tbar[slave]
    S = T[slave]
    Z = scipy.linalg.lu_solve(transform.lu, Sbar, trans=1)
    Kbar[np.ix_(slave, master)] -= Z
    Kbar[np.ix_(slave, slave)] -= Z @ S.T
    return Kbar


def reduced_layers(layers, partition):
    """Re-index sleeper attachments from bridge DOFs to master positions."""
    pos = -np.ones(partition.n, dtype=int)
    pos[partition.master] = np.arange(len(partition.master))
    out = []
    for layer in layers:
        attach = np.asarray(layer.attach, dtype=int)
        mapped = pos[attach]
        if np.any(mapped < 0):
            bad = attach[mapped < 0].tolist()
            raise ReductionError(f"sleeper attached to slave DOF(s) {bad}; they must be masters")
        out.append(InteractionLayer(layer.positions, layer.stiffness, layer.damping, mapped))
    return tuple(out)


def combine_reduced_with_train(reduced, rails, layers, partition, trains=()):
    """Couple the Guyan-reduced bridge to the rails (sleepers must sit on masters)."""
    rlayers = reduced_layers(layers, partition)
    track = build_track(rails, rlayers, reduced.size)
    return couple_matrices(track, reduced.mass, reduced.damping, reduced.stiffness, trains,
                           bridge_dofs=np.asarray(partition.master))
