"""Time the compiled kernels against the plain-NumPy fallback.

Each configuration runs in a fresh interpreter so the ``SPANID_DISABLE_NUMBA``
switch takes effect at import time. The first call in each child is a warm-up
(it includes JIT compilation or cache loading) and is reported separately.

Usage::

    python benchmarks/bench_kernels.py [--repeat 3] [--duration 1.0]
"""

import argparse
import json
import os
import subprocess
import sys

CHILD = r"""
import json, time, numpy as np
from spanid._accel import USE_NUMBA
from spanid.inputs import load_bridge_model, load_train
from spanid.gradients import ResponseModel, model_masters, trajectory_loss_gradient
from spanid.learn import BatchLoss, LossConfig

def case(name, scheme, dt, reduce):
    model = load_bridge_model(name)
    masters = model_masters(model) if reduce else None
    rm = ResponseModel.for_duration(model, [load_train("train-50mph")], scheme, dt, {duration},
                                    masters=masters)
    k = np.ones(model.n_members)
    rm.set_k(k); D, _ = rm.simulate()
    loss = BatchLoss(D * 1.01, None, LossConfig(use_acceleration=False))
    def fwd():
        rm.set_k(k); rm.simulate()
    def grad():
        trajectory_loss_gradient(rm, k, loss, 1)
    out = {{}}
    for label, fn in (("forward", fwd), ("forward+adjoint", grad)):
        t = time.perf_counter(); fn(); warm = time.perf_counter() - t
        runs = []
        for _ in range({repeat}):
            t = time.perf_counter(); fn(); runs.append(time.perf_counter() - t)
        out[label] = {{"warmup_s": warm, "best_s": min(runs), "steps": rm.nsteps}}
    return out

res = {{"numba": USE_NUMBA,
        "rk4 2d full": case("reference-2d", "rk4", 7e-4, False),
        "radau 3d reduced": case("reference-3d", "radau", 2e-3, True)}}
print(json.dumps(res))
"""


def run(disable, repeat, duration):
    env = dict(os.environ)
    env.pop("SPANID_DISABLE_NUMBA", None)
    if disable:
        env["SPANID_DISABLE_NUMBA"] = "1"
    code = CHILD.format(repeat=repeat, duration=duration)
    r = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                       check=True)
    return json.loads(r.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--duration", type=float, default=1.0, help="simulated seconds per case")
    args = ap.parse_args(argv)
    fast = run(False, args.repeat, args.duration)
    slow = run(True, args.repeat, args.duration)
    print(f"{'case':<18} {'pass':<16} {'steps':>6} {'numba s':>9} {'numpy s':>9} {'speed-up':>8}")
    for case in ("rk4 2d full", "radau 3d reduced"):
        for label in ("forward", "forward+adjoint"):
            f, s = fast[case][label], slow[case][label]
            print(f"{case:<18} {label:<16} {f['steps']:6d} {f['best_s']:9.4f} {s['best_s']:9.4f} "
                  f"{s['best_s'] / f['best_s']:8.1f}x")
    print(f"numba warm-up (first call, includes compile or cache load): "
          f"{fast['rk4 2d full']['forward']['warmup_s']:.2f} s")


if __name__ == "__main__":
    main()
