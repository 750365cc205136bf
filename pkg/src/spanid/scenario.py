"""Scenario files: one crossing, the damage to inject and the identification setup.

::

    {
      "bridge_model": "reference-2d" | "path/to/model.json",
      "train": "train-50mph" | "path.json" | {...}      (or "trains": [{"file"|inline, "track": 0}])
      "scheme": "rk4" | "radau",
      "dt_s": 0.0007 | null,                             null: automatic rule
      "duration_s": null,                                null: until the last axle leaves
      "reduction": {"enabled": false, "extra_masters": [[node, "y"]], "truth_model": "full"},
      "observed_dofs": "all" | "masters" | [[node, "y"], ...],
      "ground_truth_deviations": [{"member": 4, "k": 0.7}, ...],
      "noise_level": 0.0,
      "seed": 0,
      "prior": [{"member": 4, "k_prior": 0.8, "confidence": 0.7, "source": "inspection"}],
      "gradient_scales": [{"member": 8, "s": 1e4}, {"group": "top_strut", "s": 1e3},
                          {"auto": "low-sensitivity", "s": 1e4, "threshold": 0.02}],
      "loss": {"huber_beta": 1.0, "displacement_weight": 0.9, "acceleration_weight": 0.1,
               "use_acceleration": true, "l1_factor": 0.001, "normalize": "global"},
      "schedule": {"optimizer": "rmsprop", "base_lr": ..., "max_lr": ..., "step_size": ..,
                   "gamma": .., "epochs": .., "batch_count": .., "tolerance": .., "patience": 20}
    }

Relative file references resolve against the scenario file's directory.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import InputError, ProfileError
from .fe_model import AXES
from .gradients import ResponseModel, ScalingProfile, model_masters
from .inputs import Document, _axis, load_bridge_model, load_train, resolve_builtin, train_from_document
from .integrate import n_steps_for, select_timestep
from .learn import (
    PRIOR_SOURCES,
    LossConfig,
    PriorEntry,
    PriorSpec,
    TrainingSchedule,
    add_noise,
    apply_prior,
    identify,
    low_sensitivity_members,
    measured_accelerations,
)

SCHEMES = ("rk4", "radau")


@dataclass
class Scenario:
    model: object
    trains: tuple
    scheme: str
    dt: float
    duration: float
    masters: np.ndarray | None
    observed: np.ndarray
    ground_truth: np.ndarray | None
    noise_level: float
    seed: int
    prior: PriorSpec
    scales: ScalingProfile
    loss: LossConfig
    schedule: TrainingSchedule
    truth_reduced: bool = False
    source: str | None = None
    raw: dict = field(default_factory=dict)
    resolved_refs: dict = field(default_factory=dict)
    scale_entries: list = field(default_factory=list)

    @property
    def nsteps(self):
        return n_steps_for(self.duration, self.dt)

    @property
    def observed_labels(self):
        return [f"{n}{AXES[a]}" for n, a in (self.model.dof_labels[i] for i in self.observed)]

    def response(self, truth=False, freeze_transform=False):
        """Response model for identification, or for ground truth when ``truth``."""
        masters = self.masters
        observed = self.observed
        if truth and not self.truth_reduced:
            masters = None
        return ResponseModel(self.model, self.trains, self.scheme, self.dt, self.nsteps,
                             masters=masters, observed=observed,
                             freeze_transform=freeze_transform)

    def initial_k(self):
        return apply_prior(self.prior, self.model.n_members)

    def resolved(self):
        """All settings with defaults materialized (for manifests and result echoes)."""
        return {
            "bridge_model": self.resolved_refs.get("bridge_model"),
            "trains": [{"source": ref, "velocity_mps": t.velocity, "entry_time_s": t.entry_time,
                        "track": t.track, "n_axles": len(t.axles)}
                       for ref, t in zip(self.resolved_refs.get("trains", []), self.trains)],
            "scheme": self.scheme,
            "dt_s": self.dt,
            "duration_s": self.duration,
            "n_steps": self.nsteps,
            "reduction": {"enabled": self.masters is not None,
                          "n_masters": None if self.masters is None else int(len(self.masters)),
                          "truth_model": "reduced" if self.truth_reduced else "full"},
            "observed_dofs": self.observed_labels,
            "ground_truth_deviations": None if self.ground_truth is None else [
                {"member": int(i), "k": float(self.ground_truth[i])}
                for i in np.flatnonzero(self.ground_truth != 1.0)],
            "noise_level": self.noise_level,
            "seed": self.seed,
            "prior": [asdict(e) for e in self.prior.entries],
            "initial_k": self.initial_k().tolist(),
            "gradient_scales": self.scale_entries,
            "loss": asdict(self.loss),
            "schedule": asdict(self.schedule),
        }


def _dataclass_from(doc, obj, path, cls):
    if obj is None:
        return cls()
    if not isinstance(obj, dict):
        raise doc.error(path, "expected an object")
    kw = {}
    known = {f.name: f for f in fields(cls)}
    for key, val in obj.items():
        if key not in known:
            raise doc.error(path + (key,), f"unknown field (allowed: {sorted(known)})")
        default = known[key].default
        if isinstance(default, bool):
            kw[key] = doc.coerce(val, path + (key,), bool)
        elif isinstance(default, int) and not isinstance(default, bool):
            kw[key] = doc.coerce(val, path + (key,), int)
        elif isinstance(default, float) or (default is None and val is not None):
            kw[key] = doc.coerce(val, path + (key,), float)
        elif isinstance(default, str):
            kw[key] = doc.coerce(val, path + (key,), str)
        else:
            kw[key] = val
    try:
        return cls(**kw)
    except InputError as exc:
        raise doc.error(path, str(exc)) from None


def _dof_list(doc, items, path, model):
    out = []
    for j, item in enumerate(items):
        ip = path + (j,)
        if not (isinstance(item, list) and len(item) == 2):
            raise doc.error(ip, "expected [node, axis]")
        nid = doc.coerce(item[0], ip + (0,), int)
        ax = _axis(doc, item[1], ip + (1,), model.ndim)
        if (nid, ax) not in model.dof_map:
            raise doc.error(ip, f"node {nid} axis {AXES[ax]} is not a free DOF")
        out.append(model.dof_map[(nid, ax)])
    return out


def _member(doc, val, path, n):
    m = doc.coerce(val, path, int)
    if not 0 <= m < n:
        raise doc.error(path, f"member {m} does not exist (model has {n})")
    return m


def load_scenario(path):
    path = Path(path)
    return scenario_from_document(Document.load(path), base=path.parent)


def scenario_from_dict(data, base=None):
    return scenario_from_document(Document(data), base=base)


def scenario_from_document(doc, base=None):
    d = doc.data
    root = ()
    if not isinstance(d, dict):
        raise doc.error(root, "top level must be an object")
    allowed = {"bridge_model", "train", "trains", "scheme", "dt_s", "duration_s", "reduction",
               "observed_dofs", "ground_truth_deviations", "noise_level", "seed", "prior",
               "gradient_scales", "loss", "schedule", "name", "description"}
    for key in d:
        if key not in allowed:
            raise doc.error((key,), "unknown field")
    refs = {}
    mref = d.get("bridge_model")
    if mref is None:
        raise doc.error(("bridge_model",), "required field missing")
    if isinstance(mref, str):
        mpath = resolve_builtin(mref, base)
        if not mpath.exists():
            raise doc.error(("bridge_model",), f"model file {str(mpath)!r} not found")
        refs["bridge_model"] = str(mpath)
        model = load_bridge_model(mpath)
    elif isinstance(mref, dict):
        refs["bridge_model"] = "inline"
        model = load_bridge_model(mref)
    else:
        raise doc.error(("bridge_model",), "expected a file name or an object")
    if model.track is None:
        raise doc.error(("bridge_model",), "bridge model defines no track")
    # trains
    if "trains" in d and "train" in d:
        raise doc.error(("trains",), "give either 'train' or 'trains'")
    items = [("train", d["train"], 0)] if "train" in d else []
    for j, t in enumerate(doc.get(d, "trains", root, list, [])):
        items.append((("trains", j), t, 0))
    if not items:
        raise doc.error(("train",), "required field missing")
    trains, train_refs = [], []
    for key, t, track in items:
        tp = (key,) if isinstance(key, str) else key
        if isinstance(t, dict) and "file" in t:
            track = doc.get(t, "track", tp, int, 0)
            t = doc.get(t, "file", tp, str)
            tp = tp + ("file",)
        if isinstance(t, str):
            tpath = resolve_builtin(t, base)
            if not tpath.exists():
                raise doc.error(tp, f"train file {str(tpath)!r} not found")
            tr = load_train(tpath, track=track)
            train_refs.append(str(tpath))
        elif isinstance(t, dict):
            tr = train_from_document(doc, tp, track)
            train_refs.append("inline")
        else:
            raise doc.error(tp, "expected a file name or an object")
        if tr.track >= len(model.track.rails):
            raise doc.error(tp, f"track {tr.track} does not exist (model has "
                                f"{len(model.track.rails)})")
        trains.append(tr)
    refs["trains"] = train_refs
    scheme = doc.get(d, "scheme", root, str, "rk4",
                     (lambda v: v in SCHEMES, f"must be one of {list(SCHEMES)}"))
    # reduction
    red = doc.get(d, "reduction", root, dict, {})
    rp = ("reduction",)
    enabled = doc.get(red, "enabled", rp, bool, False)
    extra = _dof_list(doc, doc.get(red, "extra_masters", rp, list, []), rp + ("extra_masters",), model)
    truth_model = doc.get(red, "truth_model", rp, str, "full",
                          (lambda v: v in ("full", "reduced"), "must be 'full' or 'reduced'"))
    masters = model_masters(model, extra) if enabled else None
    # grid
    duration = doc.get(d, "duration_s", root, float, None) if d.get("duration_s") is not None else None
    if duration is None:
        duration = max(t.crossing_time(model.track.rails[t.track].length) for t in trains)
    elif duration <= 0:
        raise doc.error(("duration_s",), "must be > 0")
    dt = doc.get(d, "dt_s", root, float, None) if d.get("dt_s") is not None else None
    if dt is not None and dt <= 0:
        raise doc.error(("dt_s",), "must be > 0")
    if dt is None:
        probe = ResponseModel(model, trains, scheme, 1.0, 1, masters=masters)
        dt = select_timestep(probe.system, scheme)
    if n_steps_for(duration, dt) < 1:
        raise doc.error(("duration_s",), "shorter than one timestep")
    # observations
    obs_raw = d.get("observed_dofs", "masters" if enabled else "all")
    if obs_raw == "all":
        if enabled:
            raise doc.error(("observed_dofs",), "'all' is not available with reduction; use 'masters'")
        observed = np.arange(model.n_dofs)
    elif obs_raw == "masters":
        observed = masters if masters is not None else np.arange(model.n_dofs)
    elif isinstance(obs_raw, list):
        observed = np.array(_dof_list(doc, obs_raw, ("observed_dofs",), model), dtype=int)
        if len(observed) == 0:
            raise doc.error(("observed_dofs",), "no observed DOFs")
        if masters is not None:
            missing = np.setdiff1d(observed, masters)
            if len(missing):
                lab = model.dof_labels[missing[0]]
                raise doc.error(("observed_dofs",), f"DOF {lab[0]}{AXES[lab[1]]} is not a master")
    else:
        raise doc.error(("observed_dofs",), "expected 'all', 'masters' or a list of [node, axis]")
    n_m = model.n_members
    gt = None
    gtr = d.get("ground_truth_deviations")
    if gtr is not None:
        gt = np.ones(n_m)
        gp = ("ground_truth_deviations",)
        if isinstance(gtr, dict):
            pairs = [((gp + (key,)), key, v) for key, v in gtr.items()]
            for p, key, v in pairs:
                try:
                    m_id = int(key)
                except ValueError:
                    raise doc.error(p, "keys must be member ids") from None
                gt[_member(doc, m_id, p, n_m)] = doc.coerce(v, p, float)
        elif isinstance(gtr, list):
            for j, e in enumerate(gtr):
                p = gp + (j,)
                gt[_member(doc, doc.get(e, "member", p), p + ("member",), n_m)] = \
                    doc.get(e, "k", p, float)
        else:
            raise doc.error(gp, "expected a list of {member, k}")
        if np.any(gt < 0.01):
            raise doc.error(gp, "deviation ratios must be >= 0.01")
    noise = doc.get(d, "noise_level", root, float, 0.0,
                    (lambda v: v >= 0, "must be >= 0"))
    seed = doc.get(d, "seed", root, int, 0, (lambda v: 0 <= v < 2 ** 64, "must be a u64"))
    entries = []
    for j, e in enumerate(doc.get(d, "prior", root, list, [])):
        p = ("prior", j)
        try:
            entries.append(PriorEntry(
                _member(doc, doc.get(e, "member", p), p + ("member",), n_m),
                doc.get(e, "k_prior", p, float),
                doc.get(e, "confidence", p, float),
                doc.get(e, "source", p, str, "inspection",
                        (lambda v: v in PRIOR_SOURCES, f"must be one of {list(PRIOR_SOURCES)}"))))
        except ProfileError as exc:
            raise doc.error(p, str(exc)) from None
    s = np.ones(n_m)
    scale_entries = []
    for j, e in enumerate(doc.get(d, "gradient_scales", root, list, [])):
        p = ("gradient_scales", j)
        val = doc.get(e, "s", p, float, check=(lambda v: v > 0, "must be > 0"))
        if "member" in e:
            idx = [_member(doc, e["member"], p + ("member",), n_m)]
            src = "member"
        elif "group" in e:
            grp = doc.get(e, "group", p, str)
            idx = [m.id for m in model.members if m.group == grp or m.group.startswith(grp + "_")]
            if not idx:
                raise doc.error(p + ("group",), f"no member belongs to group {grp!r}")
            src = f"group:{grp}"
        elif "auto" in e:
            doc.get(e, "auto", p, str, check=(lambda v: v == "low-sensitivity",
                                              "only 'low-sensitivity' is supported"))
            thr = doc.get(e, "threshold", p, float, 0.02)
            idx = low_sensitivity_members(model, thr).tolist()
            src = "fe-sensitivity"
        else:
            raise doc.error(p, "needs 'member', 'group' or 'auto'")
        s[idx] = val
        scale_entries.append({"source": src, "s": val, "members": [int(i) for i in idx]})
    loss = _dataclass_from(doc, d.get("loss"), ("loss",), LossConfig)
    schedule = _dataclass_from(doc, d.get("schedule"), ("schedule",), TrainingSchedule)
    return Scenario(model=model, trains=tuple(trains), scheme=scheme, dt=float(dt),
                    duration=float(duration), masters=masters, observed=np.asarray(observed, int),
                    ground_truth=gt, noise_level=noise, seed=seed,
                    prior=PriorSpec(tuple(entries), ScalingProfile(s)), scales=ScalingProfile(s),
                    loss=loss, schedule=schedule, truth_reduced=truth_model == "reduced",
                    source=doc.source, raw=d, resolved_refs=refs, scale_entries=scale_entries)


def simulate_measurements(scenario, seed=None):
    """Ground-truth crossing at the scenario's damage, with seeded noise.

    Returns ``(t, D, V)`` on the observed DOFs, rows ``0..nsteps``.
    """
    seed = scenario.seed if seed is None else seed
    resp = scenario.response(truth=True)
    k = np.ones(scenario.model.n_members) if scenario.ground_truth is None else scenario.ground_truth
    resp.set_k(k)
    D, V = resp.simulate()
    if scenario.noise_level > 0:
        rng = np.random.default_rng(seed)
        D = add_noise(D, scenario.noise_level, rng)
        V = add_noise(V, scenario.noise_level, rng)
    return resp.times, D, V


def run_identification(scenario, D, V, freeze_transform=False, callback=None):
    """Identify deviation ratios from observed displacement and velocity records."""
    resp = scenario.response(freeze_transform=freeze_transform)
    A = measured_accelerations(V, scenario.dt) if scenario.loss.use_acceleration else None
    return identify(resp, D, A, scenario.loss, scenario.schedule, prior=scenario.prior,
                    scales=scenario.scales, ground_truth=scenario.ground_truth,
                    callback=callback)
