"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the verdict lines are
also collected in the terminal summary. Criteria 5 to 8 run full
identifications and take several minutes each.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from spanid.cli import main as cli_main
from spanid.coupling import (
    Axle,
    InteractionLayer,
    RailModel,
    TrainConfig,
    build_track,
    couple_matrices,
    couple_systems,
    moving_force,
    rail_modal_matrices,
    time_varying_mass,
)
from spanid.fe_model import SystemMatrices, natural_frequencies
from spanid.gradients import (
    TOLERANCE,
    VERIFY_STEP,
    finite_difference_gradient,
    model_masters,
    relative_errors,
    trajectory_loss_gradient,
)
from spanid.integrate import radau_step, simulate, system_f_max
from spanid.learn import (
    BatchLoss,
    LossConfig,
    PriorEntry,
    PriorSpec,
    TrainingSchedule,
    apply_prior,
    huber_loss,
    huber_loss_grad,
    identify,
    low_sensitivity_members,
)
from spanid.reduction import (
    MasterSlavePartition,
    combine_reduced_with_train,
    guyan_transform,
    reduce_system,
)
from spanid.scenario import (
    load_scenario,
    run_identification,
    scenario_from_dict,
    simulate_measurements,
)

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def _load_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


# -- 1 ------------------------------------------------------------------------
def _sdof():
    rail = RailModel(10.0, 1.0, 1.0, n_modes=1)
    bridge = SystemMatrices(np.eye(1), np.zeros((1, 1)), np.array([[(2 * np.pi) ** 2]]))
    return couple_systems(bridge, rail, InteractionLayer.uniform([5.0], [0], 0.0, 0.0))


class _Decay:
    """``v' = -v``: the velocity of a massless-spring, unit-damper oscillator."""

    size = 1
    M_const = np.eye(1)
    C = np.eye(1)
    K = np.zeros((1, 1))

    def force(self, t):
        return np.zeros(1)

    def mass(self, t):
        return self.M_const


def test_criterion_1_integrator_orders(acceptance):
    t0 = time.perf_counter()
    sys_ = _sdof()
    X0 = np.array([0.0, 1.0, 0.0, 0.0])
    ratios = {}
    for scheme in ("rk4", "radau"):
        errs = []
        for dt in (0.02, 0.01):
            traj = simulate(sys_, scheme, dt, 1.0, initial=X0)
            errs.append(np.abs(traj.states[:, 1] - np.cos(2 * np.pi * traj.timestamps)).max())
        ratios[scheme] = errs[0] / errs[1]
    one = radau_step(_Decay(), np.array([0.0, 1.0]), 0.0, 0.1)[1]
    r_exact = (1 - 0.1 / 3) / (1 + 2 * 0.1 / 3 + 0.01 / 6)
    elapsed = time.perf_counter() - t0
    ok = (12 <= ratios["rk4"] <= 20 and 6 <= ratios["radau"] <= 10
          and abs(one - r_exact) < 1e-6 and abs(one - 0.90484) < 1e-5 and elapsed < 10)
    acceptance(1, ok, f"rk4 ratio {ratios['rk4']:.2f}, radau ratio {ratios['radau']:.2f}, "
                      f"R(-0.1) = {one:.7f}, {elapsed:.1f} s")
    assert ok


# -- 2 ------------------------------------------------------------------------
def test_criterion_2_moving_load(acceptance):
    t0 = time.perf_counter()
    L, EI, rho_a, W, v = 20.0, 3e7, 100.0, 1e4, 0.5
    rail = RailModel(L, EI, rho_a, n_modes=5, damping_ratio=0.05)
    bridge = SystemMatrices(np.eye(1), np.zeros((1, 1)), np.eye(1))
    tr = TrainConfig((Axle(0.0, W, 0.0),), v)
    sys_ = couple_systems(bridge, rail, InteractionLayer.uniform([5.0], [0], 0.0, 0.0), [tr])
    traj = simulate(sys_, "rk4", 1e-3, L / v)
    mid = -(rail.mode_shapes(L / 2) @ traj.states[:, :5].T)
    x = np.clip(v * traj.timestamps, 0.0, L)
    a = np.minimum(x, L - x)
    influence = W * a * (3 * L ** 2 - 4 * a ** 2) / (48 * EI)
    env_err = np.abs(mid - influence).max() / influence.max()
    static = W * L ** 3 / (48 * EI)
    conv = []
    for n in (1, 3, 9, 27, 81):
        r = RailModel(L, EI, rho_a, n_modes=n)
        _, K, _ = rail_modal_matrices(r)
        p = moving_force(TrainConfig((Axle(0.0, W, 0.0),), L / 2), r, 1.0)
        conv.append(abs(abs(r.mode_shapes(L / 2) @ np.linalg.solve(K, p)) - static) / static)
    monotone = all(b <= a_ + 1e-15 for a_, b in zip(conv, conv[1:]))
    elapsed = time.perf_counter() - t0
    ok = env_err < 0.02 and monotone and conv[-1] < 1e-4 and elapsed < 30
    acceptance(2, ok, f"envelope error {100 * env_err:.2f}%, static midspan error by modes "
                      f"{[f'{c:.1e}' for c in conv]}, {elapsed:.1f} s")
    assert ok


# -- 3 ------------------------------------------------------------------------
def _guyan_checks(model, rng):
    masters = model_masters(model)
    part = MasterSlavePartition.from_masters(masters, model.n_dofs)
    mats = model.assemble(np.ones(model.n_members))
    tr = guyan_transform(mats.stiffness, part)
    red = reduce_system(mats.mass, mats.damping, mats.stiffness, tr)
    f = np.zeros(model.n_dofs)
    f[part.master] = rng.standard_normal(len(part.master))
    u = np.linalg.solve(mats.stiffness, f)
    ur = np.linalg.solve(red.stiffness, f[part.master])
    static_err = np.abs(ur - u[part.master]).max() / np.abs(u[part.master]).max()
    wf = natural_frequencies(mats.mass, mats.stiffness)
    wr = natural_frequencies(red.mass, red.stiffness)
    bound = bool(np.all(wr >= wf[: len(wr)] * (1 - 1e-10)))
    tl = model.track
    full_sys = couple_matrices(build_track(tl.rails, tl.layers, model.n_dofs), mats.mass,
                               mats.damping, mats.stiffness)
    red_sys = combine_reduced_with_train(red, tl.rails, tl.layers, part)
    return static_err, bound, system_f_max(red_sys), system_f_max(full_sys)


def test_criterion_3_guyan(acceptance, model2d, model3d):
    rng = np.random.default_rng(3)
    parts, ok = [], True
    for name, model in (("2d", model2d), ("3d", model3d)):
        err, bound, f_red, f_full = _guyan_checks(model, rng)
        ok &= err < 1e-10 and bound and f_red < f_full
        parts.append(f"{name}: static {err:.1e}, upper bound {bound}, "
                     f"f_max {f_red:.1f} < {f_full:.1f} Hz")
    acceptance(3, ok, "; ".join(parts))
    assert ok


# -- 4 ------------------------------------------------------------------------
def _gradient_check(scn, batch_count):
    _, D, V = simulate_measurements(scn)
    loss = BatchLoss(D, None, scn.loss)
    k = scn.initial_k()
    resp = scn.response()
    _, g, handoff = trajectory_loss_gradient(resp, k, loss, batch_count)
    fd = finite_difference_gradient(resp, k, loss, batch_count, h=VERIFY_STEP, handoff=handoff,
                                    extrapolate=True)
    return relative_errors(g, fd)


def test_criterion_4_gradient_exactness(acceptance):
    t0 = time.perf_counter()
    s2 = load_scenario(SCENARIOS / "2d_case1.json")
    s3 = load_scenario(SCENARIOS / "3d_cluster.json")
    e2 = _gradient_check(s2, s2.schedule.batch_count)
    e3 = _gradient_check(s3, s3.schedule.batch_count)
    elapsed = time.perf_counter() - t0
    ok = (e2.max() < TOLERANCE["rk4"] and e3.max() < TOLERANCE["radau"] and elapsed < 600
          and len(e2) == 37 and len(e3) == 123)
    acceptance(4, ok, f"2D RK-4 worst {e2.max():.2e} (member {e2.argmax()}) < 1e-5; "
                      f"3D Radau+Guyan worst {e3.max():.2e} (member {e3.argmax()}) < 1e-4; "
                      f"{elapsed:.0f} s")
    assert ok


# -- 5 ------------------------------------------------------------------------
def _summary(res):
    return (f"accuracy {res['accuracy']:.2f}%, max error {res['max_error_pct']:.2f}%, "
            f"{len(res['false_positives'])} false positives, {res['epochs']} epochs")


@pytest.mark.slow
def test_criterion_5_identification_2d(acceptance, tmp_path):
    scn = SCENARIOS / "2d_case1.json"
    sim, out = tmp_path / "sim", tmp_path / "id"
    assert cli_main(["simulate", "--scenario", str(scn), "--out", str(sim)]) == 0
    assert cli_main(["identify", "--scenario", str(scn), "--measurements",
                     str(sim / "measurements.csv"), "--out", str(out)]) == 0
    res = _load_json(out / "result.json")
    wall = _load_json(out / "manifest.json")["identification_wall_clock_s"]
    errs = [d["error_pct"] for d in res["damaged"]]
    ok = (len(errs) == 3 and max(errs) < 2.0 and not res["false_positives"]
          and res["epochs"] <= 300 and wall < 1800)
    acceptance(5, ok, f"{_summary(res)}, predicted "
                      f"{[round(d['predicted'], 4) for d in res['damaged']]}, {wall:.0f} s")
    assert ok


# -- 6 ------------------------------------------------------------------------
SWEEP_RUNS = 10
SWEEP_EPOCHS = 800


def random_damage(model, rng, n_max=10, lo=0.6, hi=1.6, min_dev=0.05):
    """Damaged members among the observable ones, ratios uniform in [lo, hi]."""
    candidates = np.setdiff1d(np.arange(model.n_members), low_sensitivity_members(model))
    n = int(rng.integers(1, n_max + 1))
    members = np.sort(rng.choice(candidates, size=n, replace=False))
    ratios = []
    while len(ratios) < n:
        r = float(rng.uniform(lo, hi))
        if abs(r - 1.0) >= min_dev:
            ratios.append(round(r, 3))
    return {int(m): r for m, r in zip(members, ratios)}


@pytest.mark.slow
def test_criterion_6_random_sweep(acceptance):
    base = _load_json(SCENARIOS / "2d_case1.json")
    rng = np.random.default_rng(2024)
    accs, clean, lines = [], 0, []
    model = None
    for run in range(SWEEP_RUNS):
        d = dict(base, schedule=dict(base["schedule"], epochs=SWEEP_EPOCHS))
        if model is None:
            model = scenario_from_dict(d, base=SCENARIOS).model
        dmg = random_damage(model, rng)
        d["ground_truth_deviations"] = [{"member": m, "k": k} for m, k in dmg.items()]
        d["seed"] = run
        scn = scenario_from_dict(d, base=SCENARIOS)
        _, D, V = simulate_measurements(scn)
        res = run_identification(scn, D, V)
        accs.append(res.accuracy)
        clean += not res.false_positives
        lines.append(f"run {run}: {len(dmg)} damaged, accuracy {res.accuracy:.2f}%, "
                     f"max error {res.max_error_pct:.2f}%, FP {len(res.false_positives)}")
        print(lines[-1])
    ok = np.mean(accs) >= 98.0 and clean >= 8
    acceptance(6, ok, f"mean accuracy {np.mean(accs):.2f}% (min {np.min(accs):.2f}%), "
                      f"{clean}/{SWEEP_RUNS} runs without false positives")
    assert ok


# -- 7 ------------------------------------------------------------------------
@pytest.mark.slow
def test_criterion_7_noise(acceptance):
    scn = load_scenario(SCENARIOS / "2d_case1_noise5.json")
    assert scn.noise_level == 0.05
    _, D, V = simulate_measurements(scn)
    res = run_identification(scn, D, V)
    ok = res.max_error_pct <= 3.0 and not res.false_positives
    acceptance(7, ok, _summary(res.to_dict()))
    assert ok


# -- 8 ------------------------------------------------------------------------
@pytest.mark.slow
def test_criterion_8_reduced_3d(acceptance):
    scn = load_scenario(SCENARIOS / "3d_cluster.json")
    assert scn.scheme == "radau" and scn.dt == 0.002 and scn.masters is not None
    assert int(np.sum(scn.ground_truth != 1.0)) == 4
    _, D, V = simulate_measurements(scn)
    res = run_identification(scn, D, V)
    fps = res.false_positives
    ok = (res.accuracy >= 97.0 and len(fps) <= 2 and all(f["error_pct"] < 8.0 for f in fps)
          and res.epochs <= 400)
    acceptance(8, ok, _summary(res.to_dict()) + f", {res.wall_clock_s:.0f} s")
    assert ok


# -- 9 ------------------------------------------------------------------------
def test_criterion_9_prior(acceptance):
    k = apply_prior(PriorSpec((PriorEntry(0, 0.8, 0.7), PriorEntry(1, 0.8, 0.0),
                               PriorEntry(2, 0.8, 1.0))), 3)
    ok = k[0] == pytest.approx(0.86, abs=1e-15) and k[1] == 1.0 and k[2] == 0.8
    acceptance(9, ok, f"blend {float(k[0])!r}, p=0 -> {float(k[1])!r}, p=1 -> {float(k[2])!r}")
    assert ok


# -- 10 -----------------------------------------------------------------------
def test_criterion_10_determinism_and_invariants(acceptance, tmp_path, model2d, model3d):
    rng = np.random.default_rng(10)
    checks = {}
    # seeded byte-identical outputs
    d = _load_json(SCENARIOS / "2d_case1_noise5.json")
    d.update(duration_s=1.0, bridge_model="reference-2d")
    d["schedule"] = dict(d["schedule"], epochs=3)
    scn = tmp_path / "s.json"
    scn.write_text(json.dumps(d), encoding="utf-8")
    outs = []
    for tag in ("a", "b"):
        cli_main(["simulate", "--scenario", str(scn), "--out", str(tmp_path / f"sim{tag}")])
        cli_main(["identify", "--scenario", str(scn), "--out", str(tmp_path / f"id{tag}"),
                  "--no-plots"])
        outs.append(((tmp_path / f"sim{tag}" / "measurements.csv").read_bytes(),
                     (tmp_path / f"id{tag}" / "result.json").read_bytes()))
    checks["byte-identical outputs"] = outs[0] == outs[1]
    # clamp after every step, with a rate large enough to hit the floor
    s = scenario_from_dict(dict(d, noise_level=0.0), base=SCENARIOS)
    _, D, _ = simulate_measurements(s)
    mins = []
    identify(s.response(), D, None, LossConfig(use_acceleration=False),
             TrainingSchedule(optimizer="rmsprop", base_lr=0.5, epochs=4, batch_count=3),
             callback=lambda e, k, L: mins.append(k.min()))
    checks["clamp >= 0.01"] = min(mins) >= 0.01
    # exact stiffness symmetry
    sym = True
    for model in (model2d, model3d):
        for _ in range(20):
            K = model.assemble(rng.uniform(0.01, 2.0, model.n_members)).stiffness
            sym &= bool(np.array_equal(K, K.T))
    checks["K symmetric"] = sym
    # time-varying mass PSD over random trains and times
    rail = RailModel(95.0, 1.58e7, 135.0, n_modes=5)
    psd = True
    for _ in range(500):
        offs = np.cumsum(rng.uniform(0.5, 20.0, rng.integers(1, 8)))
        tr = TrainConfig(tuple(Axle(m, 0.0, o) for m, o in
                               zip(rng.uniform(0, 4e4, len(offs)), offs - offs[0])),
                         rng.uniform(5, 40))
        dm = time_varying_mass(tr, rail, rng.uniform(0, 10))
        psd &= bool(np.array_equal(dm, dm.T)
                    and np.linalg.eigvalsh(dm).min() >= -1e-9 * max(1.0, np.abs(dm).max()))
    checks["delta-M PSD"] = psd
    # Huber C1 at beta
    beta, eps = 1.0, 1e-9
    v = [huber_loss([beta + s], [0.0], beta) for s in (-eps, eps)]
    g = [huber_loss_grad([beta + s], [0.0], beta)[1][0] for s in (-eps, eps)]
    checks["Huber C1"] = abs(v[0] - v[1]) < 1e-8 and abs(g[0] - g[1]) < 1e-8
    ok = all(checks.values())
    acceptance(10, ok, ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items()))
    assert ok


def test_sweep_sampler_properties(model2d):
    rng = np.random.default_rng(0)
    low = set(low_sensitivity_members(model2d).tolist())
    for _ in range(50):
        dmg = random_damage(model2d, rng)
        assert 1 <= len(dmg) <= 10
        assert not low & set(dmg)
        assert all(0.6 <= k <= 1.6 and abs(k - 1) >= 0.05 for k in dmg.values())
