import numpy as np
import pytest

from spanid.coupling import build_track, couple_matrices
from spanid.errors import ReductionError
from spanid.fe_model import natural_frequencies
from spanid.gradients import model_masters
from spanid.integrate import system_f_max
from spanid.reduction import (
    MasterSlavePartition,
    combine_reduced_with_train,
    guyan_transform,
    reduce_system,
    transform_vjp,
)


def _chain(k1=1.0, k2=1.0):
    return np.array([[k1 + k2, -k2], [-k2, k2]])


def test_no_slaves_identity():
    K = _chain()
    tr = guyan_transform(K, MasterSlavePartition.from_masters([0, 1], 2))
    np.testing.assert_array_equal(tr.T, np.eye(2))


def test_two_dof_chain():
    K = _chain(1.0, 1.0)
    tr = guyan_transform(K, MasterSlavePartition.from_masters([1], 2))
    assert tr.T[0, 0] == pytest.approx(0.5)
    red = reduce_system(np.eye(2), np.zeros((2, 2)), K, tr)
    assert red.stiffness[0, 0] == pytest.approx(0.5)
    tr2 = guyan_transform(_chain(3.0, 1.0), MasterSlavePartition.from_masters([1], 2))
    assert tr2.T[0, 0] == pytest.approx(1.0 / 4.0)


def test_singular_slave_block():
    K = np.array([[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(ReductionError):
        guyan_transform(K, MasterSlavePartition.from_masters([0], 2))


def _reduced(model):
    masters = model_masters(model)
    part = MasterSlavePartition.from_masters(masters, model.n_dofs)
    mats = model.assemble(np.ones(model.n_members))
    tr = guyan_transform(mats.stiffness, part)
    return part, mats, tr, reduce_system(mats.mass, mats.damping, mats.stiffness, tr)


@pytest.mark.parametrize("name", ["model2d", "model3d"])
def test_static_shape_residual(name, request):
    part, mats, tr, _ = _reduced(request.getfixturevalue(name))
    R = mats.stiffness @ tr.T
    scale = np.abs(mats.stiffness).max()
    assert np.abs(R[part.slave]).max() < 1e-9 * scale
    np.testing.assert_array_equal(tr.T[part.master], np.eye(len(part.master)))


@pytest.mark.parametrize("name", ["model2d", "model3d"])
def test_static_exactness_at_masters(name, request, rng):
    part, mats, tr, red = _reduced(request.getfixturevalue(name))
    f = np.zeros(part.n)
    f[part.master] = rng.standard_normal(len(part.master))
    u = np.linalg.solve(mats.stiffness, f)
    ur = np.linalg.solve(red.stiffness, f[part.master])
    assert np.abs(ur - u[part.master]).max() / np.abs(u[part.master]).max() < 1e-10


@pytest.mark.parametrize("name", ["model2d", "model3d"])
def test_frequency_upper_bound(name, request):
    part, mats, tr, red = _reduced(request.getfixturevalue(name))
    wf = natural_frequencies(mats.mass, mats.stiffness)
    wr = natural_frequencies(red.mass, red.stiffness)
    assert np.all(wr >= wf[: len(wr)] * (1 - 1e-10))
    assert wr[-1] < wf[-1]


def _coupled(model, reduce):
    tl = model.track
    mats = model.assemble(np.ones(model.n_members))
    if not reduce:
        return couple_matrices(build_track(tl.rails, tl.layers, model.n_dofs), mats.mass,
                               mats.damping, mats.stiffness)
    part, _, tr, red = _reduced(model)
    return combine_reduced_with_train(red, tl.rails, tl.layers, part)


def _coupled_freqs(sys_):
    return natural_frequencies(sys_.M_const, sys_.K)


def test_reduced_coupled_low_modes_3d(model3d):
    full = _coupled_freqs(_coupled(model3d, False))
    red = _coupled_freqs(_coupled(model3d, True))
    np.testing.assert_allclose(red[:5], full[:5], rtol=0.02)


def test_reduced_fmax_below_full_3d(model3d):
    assert system_f_max(_coupled(model3d, True)) < system_f_max(_coupled(model3d, False))


def test_all_master_partition_bitwise(model2d):
    tl = model2d.track
    mats = model2d.assemble(np.ones(model2d.n_members))
    part = MasterSlavePartition.from_masters(np.arange(model2d.n_dofs), model2d.n_dofs)
    tr = guyan_transform(mats.stiffness, part)
    red = reduce_system(mats.mass, mats.damping, mats.stiffness, tr)
    a = combine_reduced_with_train(red, tl.rails, tl.layers, part)
    b = _coupled(model2d, False)
    for x, y in ((a.K, b.K), (a.C, b.C), (a.M_const, b.M_const)):
        assert np.array_equal(x, y)


def test_sleeper_on_slave_rejected(model2d):
    tl = model2d.track
    attached = np.unique(np.concatenate([layer.attach for layer in tl.layers]))
    masters = np.setdiff1d(np.arange(model2d.n_dofs), attached[:1])
    part = MasterSlavePartition.from_masters(masters, model2d.n_dofs)
    mats = model2d.assemble(np.ones(model2d.n_members))
    red = reduce_system(mats.mass, mats.damping, mats.stiffness,
                        guyan_transform(mats.stiffness, part))
    with pytest.raises(ReductionError):
        combine_reduced_with_train(red, tl.rails, tl.layers, part)


def test_transform_vjp_matches_finite_differences(rng):
    n, masters = 7, [0, 3, 5]
    A = rng.standard_normal((n, n))
    K0 = A @ A.T + n * np.eye(n)
    B = rng.standard_normal((n, n))
    M = B @ B.T + np.eye(n)
    C = 0.01 * K0 + 0.1 * M
    part = MasterSlavePartition.from_masters(masters, n)
    Gm, Gc, Gk = (rng.standard_normal((3, 3)) for _ in range(3))

    def loss(K):
        tr = guyan_transform(K, part)
        red = reduce_system(M, C, K, tr)
        return np.sum(Gm * red.mass) + np.sum(Gc * red.damping) + np.sum(Gk * red.stiffness)

    tr = guyan_transform(K0, part)
    sym = lambda G: 0.5 * (G + G.T)  # noqa: E731
    Kbar = transform_vjp(tr, M, C, K0, sym(Gm), sym(Gc), sym(Gk))
    D = rng.standard_normal((n, n))
    D = D + D.T
    h = 1e-6
    fd = (loss(K0 + h * D) - loss(K0 - h * D)) / (2 * h)
    assert np.sum(Kbar * D) == pytest.approx(fd, rel=1e-7)
    frozen = transform_vjp(tr, M, C, K0, sym(Gm), sym(Gc), sym(Gk), freeze_transform=True)
    assert abs(np.sum(frozen * D) - fd) > 1e-6 * abs(fd)
