import numpy as np
import pytest

from spanid.coupling import Axle, InteractionLayer, RailModel, TrainConfig, build_track, \
    couple_matrices, couple_systems
from spanid.errors import InputError, InstabilityError
from spanid.fe_model import SystemMatrices, natural_frequencies
from spanid.gradients import ResponseModel
from spanid.integrate import (
    RADAU,
    Propagator,
    first_order_rhs,
    lti_reference,
    radau_step,
    read_trajectory_csv,
    rk4_step,
    select_timestep,
    simulate,
    timestep_rule,
    write_trajectory_csv,
)


class Sdof:
    """Constant-mass single-DOF stand-in for the coupled system."""

    def __init__(self, m=1.0, c=0.0, k=(2 * np.pi) ** 2):
        self.size = 1
        self.M_const = np.array([[m]])
        self.C = np.array([[c]])
        self.K = np.array([[k]])

    def force(self, t):
        return np.zeros(1)

    def mass(self, t):
        return self.M_const


def _coupled_sdof(k=(2 * np.pi) ** 2, c=0.0):
    """Bridge SDOF plus one decoupled rail mode (exercises the compiled sweeps)."""
    rail = RailModel(10.0, 1.0, 1.0, n_modes=1)
    bridge = SystemMatrices(np.eye(1), np.array([[c]]), np.array([[k]]))
    return couple_systems(bridge, rail, InteractionLayer.uniform([5.0], [0], 0.0, 0.0))


def test_rhs_equilibrium():
    np.testing.assert_array_equal(first_order_rhs(Sdof(), 0.0, np.zeros(2)), 0.0)


def test_rhs_sdof():
    d = first_order_rhs(Sdof(), 0.0, np.array([1.0, 0.0]))
    np.testing.assert_allclose(d, [0.0, -(2 * np.pi) ** 2])
    d = first_order_rhs(Sdof(), 0.0, np.array([0.3, 0.7]))
    assert d[0] == 0.7


def test_rk4_sdof_cosine():
    X = np.array([1.0, 0.0])
    sys_ = Sdof()
    for i in range(1000):
        X = rk4_step(sys_, X, i * 1e-3, 1e-3)
    assert X[0] == pytest.approx(1.0, abs=1e-8)


def test_rk4_propagator_sdof_cosine():
    sys_ = _coupled_sdof()
    X0 = np.array([0.0, 1.0, 0.0, 0.0])
    traj = simulate(sys_, "rk4", 1e-3, 1.0, initial=X0)
    assert traj.states[-1, 1] == pytest.approx(1.0, abs=1e-8)
    np.testing.assert_array_equal(traj.states[:, 0], 0.0)


@pytest.mark.parametrize("scheme,lo,hi", [("rk4", 12, 20), ("radau", 6, 10)])
def test_convergence_order(scheme, lo, hi):
    sys_ = _coupled_sdof()
    X0 = np.array([0.0, 1.0, 0.0, 0.0])
    errs = []
    for dt in (0.02, 0.01):
        traj = simulate(sys_, scheme, dt, 1.0, initial=X0)
        exact = np.cos(2 * np.pi * traj.timestamps)
        errs.append(np.abs(traj.states[:, 1] - exact).max())
    assert lo <= errs[0] / errs[1] <= hi


def test_zero_state_stays_zero():
    sys_ = _coupled_sdof()
    for scheme in ("rk4", "radau"):
        traj = simulate(sys_, scheme, 1e-3, 0.1)
        assert not np.any(traj.states)


def test_radau_scalar_decay():
    # u' = v, v' = -v: the velocity obeys y' = -y
    X = radau_step(Sdof(c=1.0, k=0.0), np.array([0.0, 1.0]), 0.0, 0.1)
    z = -0.1
    assert X[1] == pytest.approx((1 + z / 3) / (1 - 2 * z / 3 + z * z / 6), rel=1e-14)
    assert X[1] == pytest.approx(np.exp(-0.1), abs=1e-5)


def test_radau_stiff_decay():
    sys_ = Sdof(c=1e6, k=0.0)
    X = np.array([0.0, 1.0])
    mags = []
    for i in range(5):
        X = radau_step(sys_, X, float(i), 1.0)
        mags.append(abs(X[1]))
    assert mags[0] < 1.0 and mags[-1] < 1e-20


def test_radau_stability_region(rng):
    z = -rng.uniform(0, 1e3, 1000) + 1j * rng.uniform(-1e3, 1e3, 1000)
    assert np.all(np.abs(RADAU.stability(z)) <= 1 + 1e-12)


def test_radau_order_conditions():
    A, b, c = RADAU.A, RADAU.b, RADAU.c
    assert b.sum() == pytest.approx(1.0)
    assert b @ c == pytest.approx(0.5)
    assert b @ c ** 2 == pytest.approx(1 / 3)
    np.testing.assert_allclose(A.sum(axis=1), c)


def test_radau_kernel_matches_reference_step():
    sys_ = _coupled_sdof(c=0.3)
    X0 = np.array([0.0, 0.5, 0.0, -1.0])
    traj = simulate(sys_, "radau", 0.05, 0.5, initial=X0)
    X = X0.copy()
    for i in range(10):
        X = radau_step(sys_, X, i * 0.05, 0.05)
    np.testing.assert_allclose(traj.states[-1], X, rtol=1e-12, atol=1e-14)


def test_timestep_rule():
    assert timestep_rule(518.8, "rk4") == pytest.approx(2e-4)
    assert timestep_rule(131.37, "radau") == 0.002
    assert timestep_rule(100.0, "rk4") <= 0.001


def test_reference_2d_timestep(model2d, train50):
    rm = ResponseModel(model2d, [train50], "rk4", 1e-3, 1)
    assert select_timestep(rm.system, "rk4") == pytest.approx(7e-4)


def test_instability_reported():
    sys_ = _coupled_sdof(k=1e8)
    with pytest.raises(InstabilityError):
        simulate(sys_, "rk4", 0.01, 5.0, initial=np.array([0.0, 1.0, 0.0, 0.0]))


def _massless(train):
    return train.with_zero_mass()


def _zero_train():
    return TrainConfig((Axle(0.0, 0.0, 0.0), Axle(0.0, 0.0, 3.0)), 20.0)


def test_zero_train_zero_trajectory(model2d):
    rm = ResponseModel.for_duration(model2d, [_zero_train()], "rk4", 7e-4, 1.0)
    D, V = rm.simulate()
    assert not np.any(D) and not np.any(V)


def test_superposition(model2d, train50):
    t1 = _massless(train50)
    t2 = TrainConfig(t1.axles[:3], t1.velocity, entry_time=0.4)
    resp = {}
    for key, trains in (("a", [t1]), ("b", [t2]), ("ab", [t1, t2])):
        rm = ResponseModel.for_duration(model2d, trains, "rk4", 7e-4, 2.0)
        resp[key] = rm.simulate()[0]
    scale = np.abs(resp["ab"]).max()
    assert np.abs(resp["a"] + resp["b"] - resp["ab"]).max() < 1e-10 * scale


def _static_shape(sys_, rng):
    """Static deflection under random loads: a release test dominated by low modes."""
    f = rng.standard_normal(sys_.size) * 1e5
    return np.linalg.solve(sys_.K, f)


def test_energy_drift_undamped(model2d, rng):
    mats = model2d.assemble(np.ones(model2d.n_members))
    tl = model2d.track
    layers = [InteractionLayer(layer.positions, layer.stiffness, np.zeros(len(layer.positions)),
                               layer.attach) for layer in tl.layers]
    track = build_track(tl.rails, layers, model2d.n_dofs)
    sys_ = couple_matrices(track, mats.mass, np.zeros_like(mats.mass), mats.stiffness)
    f_max = natural_frequencies(sys_.M_const, sys_.K)[-1] / (2 * np.pi)
    dt = 1.0 / f_max / 20
    n = sys_.size
    X0 = np.concatenate([_static_shape(sys_, rng), np.zeros(n)])
    traj = simulate(sys_, "rk4", dt, 10000 * dt + dt / 2, initial=X0)
    M, K = sys_.M_const, sys_.K

    def energy(X):
        return 0.5 * X[n:] @ M @ X[n:] + 0.5 * X[:n] @ K @ X[:n]

    e0 = energy(traj.states[0])
    drift = max(abs(energy(X) - e0) for X in traj.states[::100])
    assert len(traj.states) == 10001
    assert drift / e0 < 1e-3


def test_matches_lti_reference(model2d, rng):
    rm = ResponseModel(model2d, [], "rk4", 7e-4, 1)
    sys_ = rm.system
    n = sys_.size
    X0 = np.concatenate([_static_shape(sys_, rng), np.zeros(n)])
    traj = simulate(sys_, "rk4", 1e-4, 0.2, initial=X0)
    ref = lti_reference(sys_, 1e-4, 0.2, initial=X0)
    assert np.abs(traj.states - ref).max() < 1e-6 * np.abs(ref).max()


def test_moving_force_influence_line():
    L, EI, rho_a, W = 20.0, 3e7, 100.0, 1e4
    rail = RailModel(L, EI, rho_a, n_modes=5, damping_ratio=0.05)
    bridge = SystemMatrices(np.eye(1), np.zeros((1, 1)), np.eye(1))
    tr = TrainConfig((Axle(0.0, W, 0.0),), 0.5)
    sys_ = couple_systems(bridge, rail, InteractionLayer.uniform([5.0], [0], 0.0, 0.0), [tr])
    traj = simulate(sys_, "rk4", 1e-3, L / 0.5)
    mid = rail.mode_shapes(L / 2) @ traj.states[:, :5].T
    assert np.abs(mid).max() == pytest.approx(W * L ** 3 / (48 * EI), rel=0.02)


def test_rk4_vs_radau_reduced_3d(model3d):
    tr = TrainConfig(tuple(Axle(3.2e4, 3.139e5, o) for o in (0.0, 2.0, 10.0, 12.0)), 22.352)
    out = {}
    for scheme, dt in (("rk4", 2e-4), ("radau", 2e-3)):
        from spanid.gradients import model_masters

        rm = ResponseModel.for_duration(model3d, [tr], scheme, dt, 2.0,
                                        masters=model_masters(model3d))
        D, _ = rm.simulate()
        out[scheme] = D[::10] if scheme == "rk4" else D
    a, b = out["rk4"], out["radau"]
    n = min(len(a), len(b))
    diff = np.sqrt(np.mean((a[:n] - b[:n]) ** 2))
    assert diff < 0.01 * np.sqrt(np.mean(a[:n] ** 2))


def test_determinism(model2d, train50):
    rm = ResponseModel.for_duration(model2d, [train50], "rk4", 7e-4, 1.0)
    a = rm.simulate()
    b = rm.simulate()
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_csv_roundtrip(tmp_path, rng):
    t = np.arange(5) * 1e-3
    D, V = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    path = tmp_path / "traj.csv"
    write_trajectory_csv(path, t, D, V, ["1x", "1y", "4y"])
    t2, D2, V2, ids = read_trajectory_csv(path)
    assert ids == ["1x", "1y", "4y"]
    assert np.array_equal(t, t2) and np.array_equal(D, D2) and np.array_equal(V, V2)
    assert path.read_text().splitlines()[0].startswith("t,dof_1x_disp")


def test_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("t,dof_1x_disp,dof_1x_vel\n0.0,1.0,2.0\n0.1,abc,2.0\n")
    with pytest.raises(InputError) as exc:
        read_trajectory_csv(p)
    assert exc.value.line == 3
    p.write_text("t,dof_1x_disp,dof_1x_vel\n0.0,1.0\n")
    with pytest.raises(InputError):
        read_trajectory_csv(p)


def test_propagator_rejects_bad_grid():
    with pytest.raises(InputError):
        Propagator(_coupled_sdof(), -1.0, 10)
    prop = Propagator(_coupled_sdof(), 0.01, 10)
    with pytest.raises(InputError):
        prop.forward(np.zeros(4), 5, 10, np.arange(4))
