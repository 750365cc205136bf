import numpy as np
import pytest

from spanid.coupling import (
    Axle,
    InteractionLayer,
    RailModel,
    TrainConfig,
    build_track,
    couple_systems,
    moving_force,
    parse_velocity,
    precompute_mass_inverses,
    rail_modal_matrices,
    time_varying_mass,
)
from spanid.errors import InputError, MappingError, PhysicalInconsistencyError
from spanid.fe_model import SystemMatrices


def _train(mass=1000.0, load=1e5, offsets=(0.0,), v=10.0, entry=0.0):
    return TrainConfig(tuple(Axle(mass, load, o) for o in offsets), v, entry)


def test_modal_mass():
    M, K, C = rail_modal_matrices(RailModel(1.0, 1.0, 2.0, n_modes=3))
    assert M[0, 0] == pytest.approx(1.0)


def test_modal_stiffness_mode2():
    _, K, _ = rail_modal_matrices(RailModel(1.0, 1.0, 2.0, n_modes=3))
    assert K[1, 1] == pytest.approx((2 * np.pi) ** 4 / 2)
    assert K[1, 1] == pytest.approx(779.27, abs=0.01)


def test_modal_orthogonality():
    M, K, C = rail_modal_matrices(RailModel(3.0, 2.0, 5.0, n_modes=5))
    for X in (M, K, C):
        np.testing.assert_array_equal(X, np.diag(np.diag(X)))


def test_delta_mass_empty_rail():
    rail = RailModel(10.0, 1.0, 1.0, n_modes=3)
    tr = _train(entry=5.0)
    np.testing.assert_array_equal(time_varying_mass(tr, rail, 1.0), np.zeros((3, 3)))


def test_delta_mass_midspan():
    rail = RailModel(10.0, 1.0, 1.0, n_modes=3)
    tr = _train(mass=1000.0, v=5.0)
    dm = time_varying_mass(tr, rail, 1.0)  # x = 5 = L/2
    assert dm[0, 0] == pytest.approx(1000.0)
    assert dm[0, 2] == pytest.approx(-1000.0)
    np.testing.assert_allclose(dm[1], 0.0, atol=1e-9)
    np.testing.assert_allclose(dm[:, 1], 0.0, atol=1e-9)


def test_delta_mass_psd_random(rng):
    rail = RailModel(95.0, 1.58e7, 135.0, n_modes=5)
    for _ in range(1000):
        offs = np.cumsum(rng.uniform(0.5, 20.0, rng.integers(1, 8)))
        tr = TrainConfig(tuple(Axle(m, 0.0, o) for m, o in
                               zip(rng.uniform(0, 4e4, len(offs)), offs - offs[0])),
                         rng.uniform(5, 40))
        dm = time_varying_mass(tr, rail, rng.uniform(0, 10))
        assert np.array_equal(dm, dm.T)
        assert np.linalg.eigvalsh(dm).min() >= -1e-9 * max(1.0, np.abs(dm).max())
        assert np.linalg.matrix_rank(dm, tol=1e-6 * max(1.0, np.abs(dm).max())) <= len(offs)


def test_moving_force():
    rail = RailModel(10.0, 1.0, 1.0, n_modes=2)
    np.testing.assert_array_equal(moving_force(_train(entry=5.0), rail, 0.0), 0.0)
    p = moving_force(_train(load=1e5, v=5.0), rail, 1.0)
    assert p[0] == pytest.approx(-1e5)


def test_static_beam_deflection_converges():
    L, EI, W = 20.0, 3e7, 1e5
    rail = RailModel(L, EI, 100.0, n_modes=99)
    _, K, _ = rail_modal_matrices(rail)
    p = moving_force(_train(load=W, v=L / 2), rail, 1.0)
    q = np.linalg.solve(K, p)
    w = rail.mode_shapes(L / 2) @ q
    assert abs(w) == pytest.approx(W * L ** 3 / (48 * EI), rel=1e-4)


def _bridge(n=2):
    return SystemMatrices(np.eye(n), np.zeros((n, n)), 10.0 * np.eye(n))


def test_zero_coupling_block_diagonal():
    rail = RailModel(10.0, 1.0, 1.0, n_modes=3)
    layer = InteractionLayer.uniform([2.0, 8.0], [0, 1], 0.0, 0.0)
    sys_ = couple_systems(_bridge(), rail, layer)
    assert np.all(sys_.K[:3, 3:] == 0) and np.all(sys_.C[:3, 3:] == 0)


def test_single_sleeper_coupling_entry():
    rail = RailModel(10.0, 1.0, 1.0, n_modes=3)
    layer = InteractionLayer.uniform([5.0], [1], 1e6, 0.0)
    sys_ = couple_systems(_bridge(), rail, layer)
    assert sys_.K[0, 3 + 1] == pytest.approx(-1e6)
    assert sys_.K[3 + 1, 3 + 1] == pytest.approx(10.0 + 1e6)


def test_coupled_symmetry_random(rng):
    rail = RailModel(10.0, 5.0, 2.0, n_modes=4)
    for _ in range(20):
        ns = rng.integers(1, 6)
        layer = InteractionLayer(rng.uniform(0, 10, ns), rng.uniform(0, 1e6, ns),
                                 rng.uniform(0, 1e3, ns), rng.integers(0, 3, ns))
        sys_ = couple_systems(_bridge(3), rail, layer)
        assert np.array_equal(sys_.K, sys_.K.T) and np.array_equal(sys_.C, sys_.C.T)


def test_attachment_to_missing_dof():
    rail = RailModel(10.0, 1.0, 1.0, n_modes=2)
    with pytest.raises(MappingError):
        build_track([rail], [InteractionLayer.uniform([1.0], [5])], 2)


def test_mass_cache_constant_when_massless():
    rail = RailModel(10.0, 1.0, 1.0, n_modes=3)
    sys_ = couple_systems(_bridge(), rail, InteractionLayer.uniform([5.0], [0]),
                          [_train(mass=0.0)])
    cache = precompute_mass_inverses(sys_, np.linspace(0, 2, 11))
    assert len(cache) == 11
    for i in range(11):
        np.testing.assert_allclose(cache.rail_inv[i], cache.rail_inv[0], rtol=1e-15)


def test_mass_cache_solve_matches_dense(rng):
    rail = RailModel(10.0, 1.0, 1.0, n_modes=3)
    sys_ = couple_systems(_bridge(), rail, InteractionLayer.uniform([5.0], [0]),
                          [_train(mass=500.0, offsets=(0.0, 2.0))])
    ts = np.linspace(0, 2, 21)
    cache = precompute_mass_inverses(sys_, ts)
    for i, t in enumerate(ts):
        rhs = rng.standard_normal(5)
        ref = np.linalg.solve(sys_.mass(t), rhs)
        np.testing.assert_allclose(cache.solve(cache.index_of(t), rhs), ref, rtol=1e-12)


def test_mass_cache_rejects_indefinite():
    rail = RailModel(10.0, 1.0, 1.0, n_modes=2)
    bad = SystemMatrices(-np.eye(2), np.zeros((2, 2)), np.eye(2))
    sys_ = couple_systems(bad, rail, InteractionLayer.uniform([5.0], [0]))
    with pytest.raises(PhysicalInconsistencyError):
        precompute_mass_inverses(sys_, [0.0])


def test_parse_velocity():
    assert parse_velocity("50 mph") == pytest.approx(22.352)
    assert parse_velocity("12mps") == 12.0
    assert parse_velocity(3) == 3.0


def test_train_invariants():
    with pytest.raises(InputError):
        TrainConfig((Axle(1.0, 1.0, 0.0),), velocity=0.0)
    with pytest.raises(InputError):
        TrainConfig((Axle(1.0, 1.0, 1.0), Axle(1.0, 1.0, 1.0)), velocity=1.0)
