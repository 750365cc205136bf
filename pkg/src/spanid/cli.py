"""Command-line front end: ``spanid simulate | identify | verify-gradients | report``.

Exit codes: 0 success, 2 input error, 3 instability, 4 divergence,
5 gradient-check failure. ``SPANID_LOG`` sets the log level (default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._accel import USE_NUMBA
from .errors import (
    DivergenceError,
    GradientCheckError,
    InputError,
    InstabilityError,
    SpanidError,
    StepFailureError,
)

logger = logging.getLogger("spanid")

EXIT_OK, EXIT_INPUT, EXIT_INSTABILITY, EXIT_DIVERGENCE, EXIT_GRADIENT = 0, 2, 3, 4, 5
MANIFEST = "manifest.json"
MEASUREMENTS = "measurements.csv"
RESULT = "result.json"


def _dump_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest(args, inputs, config, outputs, seed, t0):
    return {
        "command": args.command,
        "argv": sys.argv[1:],
        "inputs": inputs,
        "resolved_config": config,
        "seed": seed,
        "tool_version": __version__,
        "numba": USE_NUMBA,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "outputs": sorted(str(p) for p in outputs),
        "wall_clock_s": time.perf_counter() - t0,
    }


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args):
    from .scenario import load_scenario

    scn = load_scenario(args.scenario)
    if args.seed is not None:
        scn.seed = args.seed
    return scn


def cmd_simulate(args):
    from .integrate import write_trajectory_csv
    from .scenario import simulate_measurements

    t0 = time.perf_counter()
    scn = _load(args)
    out = _out_dir(args)
    t, D, V = simulate_measurements(scn)
    csv_path = out / MEASUREMENTS
    write_trajectory_csv(csv_path, t, D, V, scn.observed_labels)
    logger.info("wrote %d rows to %s", len(t), csv_path)
    print(f"{len(t)} rows, {len(scn.observed_labels)} DOFs, dt = {scn.dt:g} s -> {csv_path}")
    _dump_json(out / MANIFEST, _manifest(args, {"scenario": str(args.scenario)}, scn.resolved(),
                                         [csv_path.name], scn.seed, t0))
    return EXIT_OK


def _read_measurements(path, scn):
    from .integrate import read_trajectory_csv

    t, D, V, ids = read_trajectory_csv(path)
    if ids != scn.observed_labels:
        raise InputError(f"measured DOFs {ids[:5]}... do not match the scenario's observed DOFs "
                         f"{scn.observed_labels[:5]}...", source=str(path), line=1)
    if len(t) > 1:
        dt = float(np.median(np.diff(t)))
        if not np.isclose(dt, scn.dt, rtol=1e-9, atol=0):
            raise InputError(f"measurement dt {dt:g} s differs from scenario dt {scn.dt:g} s",
                             source=str(path))
    if len(t) != scn.nsteps + 1:
        raise InputError(f"measurements have {len(t)} rows; the scenario grid has "
                         f"{scn.nsteps + 1}", source=str(path))
    return D, V


def cmd_identify(args):
    from .report import summary_text, write_plots
    from .scenario import run_identification, simulate_measurements

    t0 = time.perf_counter()
    scn = _load(args)
    out = _out_dir(args)
    inputs = {"scenario": str(args.scenario)}
    if args.measurements:
        D, V = _read_measurements(args.measurements, scn)
        inputs["measurements"] = str(args.measurements)
    else:
        _, D, V = simulate_measurements(scn)
    config = scn.resolved()
    config["freeze_transform"] = bool(args.freeze_transform)
    outputs = []
    try:
        result = run_identification(scn, D, V, freeze_transform=args.freeze_transform)
    except DivergenceError as exc:
        dump = out / "last_good.json"
        _dump_json(dump, {"epoch": exc.epoch, "error": str(exc),
                          "k": None if exc.last_good is None else np.asarray(exc.last_good).tolist()})
        _dump_json(out / MANIFEST, _manifest(args, inputs, config, [dump.name], scn.seed, t0))
        raise
    res = result.to_dict()
    wall = res.pop("wall_clock_s")
    _dump_json(out / RESULT, res)
    outputs.append(RESULT)
    if not args.no_plots:
        outputs += [p.name for p in write_plots(res, out)]
    sys.stdout.write(summary_text(res))
    manifest = _manifest(args, inputs, config, outputs, scn.seed, t0)
    manifest["identification_wall_clock_s"] = wall
    _dump_json(out / MANIFEST, manifest)
    return EXIT_OK


def cmd_verify_gradients(args):
    from .gradients import (
        TOLERANCE,
        finite_difference_gradient,
        relative_errors,
        trajectory_loss_gradient,
    )
    from .learn import BatchLoss, measured_accelerations
    from .scenario import simulate_measurements

    t0 = time.perf_counter()
    scn = _load(args)
    out = _out_dir(args)
    _, D, V = simulate_measurements(scn)
    A = measured_accelerations(V, scn.dt) if scn.loss.use_acceleration else None
    loss = BatchLoss(D, A, scn.loss)
    # the healthy starting point (or the prior) sits away from the damaged truth
    k = scn.initial_k()
    bc = scn.schedule.batch_count if args.batch_count is None else args.batch_count
    tol = TOLERANCE[scn.scheme] if args.tol is None else args.tol
    resp = scn.response(freeze_transform=args.freeze_transform)
    _, g_adj, handoff = trajectory_loss_gradient(resp, k, loss, bc)
    fd_resp = scn.response() if args.freeze_transform else resp
    g_fd = finite_difference_gradient(fd_resp, k, loss, bc, h=args.h, handoff=handoff,
                                      jobs=args.jobs, extrapolate=not args.plain_fd)
    err = relative_errors(g_adj, g_fd)
    table = out / "gradient_check.csv"
    with open(table, "w", encoding="utf-8") as fh:
        fh.write("member,adjoint,finite_difference,relative_error\n")
        for i in range(len(k)):
            fh.write(f"{i},{g_adj[i]!r},{g_fd[i]!r},{err[i]!r}\n")
    worst = int(np.argmax(err))
    print(f"{'member':>6} {'adjoint':>14} {'fd':>14} {'rel.err':>9}")
    for i in range(len(k)):
        print(f"{i:6d} {g_adj[i]:14.6e} {g_fd[i]:14.6e} {err[i]:9.2e}")
    verdict = "PASS" if err[worst] < tol else "FAIL"
    print(f"worst: member {worst}, relative error {err[worst]:.3e} (tolerance {tol:g}) {verdict}")
    config = scn.resolved()
    config.update({"batch_count": bc, "fd_step": args.h, "tolerance": tol,
                   "fd_extrapolated": not args.plain_fd,
                   "freeze_transform": bool(args.freeze_transform),
                   "evaluation_k": k.tolist()})
    _dump_json(out / MANIFEST, _manifest(args, {"scenario": str(args.scenario)}, config,
                                         [table.name], scn.seed, t0))
    if verdict == "FAIL":
        raise GradientCheckError(f"member {worst}: relative error {err[worst]:.3e} >= {tol:g}")
    return EXIT_OK


def cmd_report(args):
    from .report import load_result, summary_text, write_plots

    t0 = time.perf_counter()
    try:
        res = load_result(args.result)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read result: {exc}", source=str(args.result)) from None
    for key in ("k", "loss_history"):
        if key not in res:
            raise InputError(f"result file lacks {key!r}", source=str(args.result))
    out = _out_dir(args)
    text = summary_text(res)
    (out / "summary.txt").write_text(text, encoding="utf-8")
    outputs = ["summary.txt"]
    if not args.no_plots:
        outputs += [p.name for p in write_plots(res, out)]
    sys.stdout.write(text)
    _dump_json(out / MANIFEST, _manifest(args, {"result": str(args.result)}, {}, outputs,
                                         None, t0))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="spanid", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenario=True):
        if scenario:
            sp.add_argument("--scenario", required=True, help="scenario JSON file")
            sp.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("simulate", help="generate ground-truth measurements")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("identify", help="identify deviation ratios")
    common(sp)
    sp.add_argument("--measurements", help="measurement CSV (default: simulate the scenario)")
    sp.add_argument("--no-plots", action="store_true", help="write JSON only")
    sp.add_argument("--freeze-transform", action="store_true",
                    help="drop the reduction-transform sensitivity from the gradient")
    sp.set_defaults(func=cmd_identify)

    sp = sub.add_parser("verify-gradients", help="adjoint vs finite-difference gradient check")
    common(sp)
    sp.add_argument("--jobs", type=int, default=1, help="parallel finite-difference workers")
    sp.add_argument("--h", type=float, default=None, help="relative FD step")
    sp.add_argument("--tol", type=float, default=None, help="relative error tolerance")
    sp.add_argument("--batch-count", type=int, default=None)
    sp.add_argument("--plain-fd", action="store_true",
                    help="single central difference instead of the h, h/2 extrapolation")
    sp.add_argument("--freeze-transform", action="store_true",
                    help="check a frozen-transform adjoint against full finite differences")
    sp.set_defaults(func=cmd_verify_gradients)

    sp = sub.add_parser("report", help="summary and plots from a result JSON")
    sp.add_argument("--result", required=True)
    common(sp, scenario=False)
    sp.add_argument("--no-plots", action="store_true")
    sp.set_defaults(func=cmd_report)
    return p


def _configure_logging():
    level = os.environ.get("SPANID_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    _configure_logging()
    args = build_parser().parse_args(argv)
    if getattr(args, "h", 0) is None:
        from .gradients import VERIFY_STEP

        args.h = VERIFY_STEP
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except GradientCheckError as exc:
        print(f"gradient check failed: {exc}", file=sys.stderr)
        return EXIT_GRADIENT
    except DivergenceError as exc:
        print(f"divergence: {exc} (last good state written to last_good.json)", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (InstabilityError, StepFailureError) as exc:
        print(f"instability: {exc}", file=sys.stderr)
        return EXIT_INSTABILITY
    except (SpanidError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
