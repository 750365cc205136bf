"""Readers for bridge model and train JSON files.

Schema errors carry the offending field path and its source line, e.g.
``model.json, line 41, field members[3].area: must be > 0``.

Bridge model file (strict SI units)::

    {
      "name": "...",
      "units": {"length": "m", "mass": "kg", "time": "s", "force": "N", "stress": "Pa"},
      "nodes":   [{"id": 0, "position": [x, y(, z)]}, ...],
      "members": [{"id": 0, "node_i": 0, "node_j": 1, "elastic_modulus": 2e11,
                   "area": 0.04, "density": 7850, "kind": "bar",
                   "second_moment": 0.0, "torsion_constant": null, "group": "..."}],
      "supports": [{"node": 0, "fixed": ["x", "y"]}],
      "nodal_masses": [{"node": 0, "mass_kg": 1000.0}],
      "mass": {"formulation": "consistent" | "lumped"},
      "damping": {"ratio": 0.02, "modes": [1, 2]} | {"ratio": .., "omega_a": .., "omega_b": ..},
      "track": {"longitudinal_axis": "x", "vertical_axis": "y",
                "rails": [{"name": "...", "rail_nodes": [...], "flexural_rigidity": ..,
                           "mass_per_length": .., "n_modes": 5, "damping_ratio": 0.0,
                           "sleepers": {"stiffness": 2e8, "damping": 5e4,
                                        "positions_m": [...] (optional)}}]},
      "reduction": {"auto_rail_level": true, "master_dofs": [[node, "y"], ...]}
    }

Train file::

    {"velocity_mps": 22.352 | "50mph", "entry_time_s": 0.0,
     "axles": [{"mass_kg": .., "load_n": .., "offset_m": ..}, ...]}
"""

from __future__ import annotations

import json
import re
from bisect import bisect_right
from dataclasses import dataclass
from json.decoder import scanstring
from pathlib import Path

import numpy as np

from .coupling import (
    DEFAULT_RAIL_MODES,
    DEFAULT_SLEEPER_DAMPING,
    DEFAULT_SLEEPER_STIFFNESS,
    Axle,
    InteractionLayer,
    RailModel,
    TrainConfig,
    parse_velocity,
)
from .errors import InputError, MappingError, SpanidError
from .fe_model import AXES, MEMBER_KINDS, BridgeModel, DampingSpec, Member, Node

DATA_DIR = Path(__file__).parent / "data"
BUILTIN_FILES = {
    "reference-2d": "reference_2d.json",
    "reference-3d": "reference_3d.json",
    "train-50mph": "train_50mph.json",
    "train-80mph": "train_80mph.json",
}
SI_UNITS = {"length": "m", "mass": "kg", "time": "s", "force": "N", "stress": "Pa"}

_NUMBER = re.compile(r"-?(?:0|[1-9]\d*)(?:\.\d+)?(?:[eE][-+]?\d+)?|true|false|null")


# -- source locations ---------------------------------------------------------
def json_locations(text):
    """Map every JSON value's path tuple to its 1-based line number."""
    line_starts = [0] + [m.end() for m in re.finditer("\n", text)]
    out = {}

    def skip(i):
        while i < len(text) and text[i] in " \t\r\n":
            i += 1
        return i

    def value(i, path):
        i = skip(i)
        out[path] = bisect_right(line_starts, i)
        ch = text[i]
        if ch == "{":
            i = skip(i + 1)
            if text[i] == "}":
                return i + 1
            while True:
                key, i = scanstring(text, skip(i) + 1)
                i = skip(i)
                i = value(i + 1, path + (key,))
                i = skip(i)
                if text[i] == "}":
                    return i + 1
                i += 1
        if ch == "[":
            i = skip(i + 1)
            if text[i] == "]":
                return i + 1
            idx = 0
            while True:
                i = skip(value(i, path + (idx,)))
                idx += 1
                if text[i] == "]":
                    return i + 1
                i += 1
        if ch == '"':
            return scanstring(text, i + 1)[1]
        m = _NUMBER.match(text, i)
        return m.end()

    try:
        value(0, ())
    except (IndexError, ValueError, AttributeError):
        pass
    return out


def format_path(path):
    s = ""
    for p in path:
        s += f"[{p}]" if isinstance(p, int) else (f".{p}" if s else str(p))
    return s


class Document:
    """A parsed JSON file plus enough context to report precise errors."""

    def __init__(self, data, text=None, source=None):
        self.data = data
        self.text = text
        self.source = source
        self._lines = None

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise InputError("file not found", source=str(path)) from None
        except UnicodeDecodeError as exc:
            raise InputError(f"not UTF-8: {exc}", source=str(path)) from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InputError(f"invalid JSON: {exc.msg}", line=exc.lineno, source=str(path)) from None
        return cls(data, text, str(path))

    def line_of(self, path):
        if self.text is None:
            return None
        if self._lines is None:
            self._lines = json_locations(self.text)
        path = tuple(path)
        while path and path not in self._lines:
            path = path[:-1]
        return self._lines.get(path)

    def error(self, path, message):
        return InputError(message, path=format_path(path) or None, line=self.line_of(path),
                          source=self.source)

    # -- typed field access --------------------------------------------------
    def get(self, obj, key, path, kind=None, default=..., check=None):
        if not isinstance(obj, dict):
            raise self.error(path, "expected an object")
        if key not in obj:
            if default is ...:
                raise self.error(path + (key,), "required field missing")
            return default
        val = obj[key]
        return self.coerce(val, path + (key,), kind, check)

    def coerce(self, val, path, kind=None, check=None):
        if kind is float:
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise self.error(path, f"expected a number, got {type(val).__name__}")
            val = float(val)
            if not np.isfinite(val):
                raise self.error(path, "must be finite")
        elif kind is int:
            if isinstance(val, bool) or not isinstance(val, int):
                raise self.error(path, f"expected an integer, got {type(val).__name__}")
        elif kind is str:
            if not isinstance(val, str):
                raise self.error(path, "expected a string")
        elif kind is bool:
            if not isinstance(val, bool):
                raise self.error(path, "expected true or false")
        elif kind is list:
            if not isinstance(val, list):
                raise self.error(path, "expected a list")
        elif kind is dict:
            if not isinstance(val, dict):
                raise self.error(path, "expected an object")
        if check is not None:
            ok, why = check
            if not ok(val):
                raise self.error(path, why)
        return val


POSITIVE = (lambda v: v > 0, "must be > 0")
NON_NEGATIVE = (lambda v: v >= 0, "must be >= 0")


def _axis(doc, val, path, ndim):
    if isinstance(val, str) and val.lower() in AXES[:ndim]:
        return AXES.index(val.lower())
    if isinstance(val, int) and not isinstance(val, bool) and 0 <= val < ndim:
        return val
    raise doc.error(path, f"axis must be one of {list(AXES[:ndim])}")


# -- track and reduction layout ------------------------------------------------
@dataclass(frozen=True)
class TrackLayout:
    """Rails over the bridge and their sleeper layers (attached to translational DOFs)."""

    rails: tuple
    layers: tuple
    names: tuple
    vertical_axis: int
    longitudinal_axis: int

    def rail_level_dofs(self):
        if not self.layers:
            return np.zeros(0, dtype=int)
        return np.unique(np.concatenate([np.asarray(l.attach, int) for l in self.layers]))


@dataclass(frozen=True)
class ReductionSpec:
    master_dofs: tuple = ()  # (node, axis) pairs
    auto_rail_level: bool = True


def _build_track(doc, spec, path, model):
    ndim = model.ndim
    lon = _axis(doc, spec.get("longitudinal_axis", "x"), path + ("longitudinal_axis",), ndim)
    ver = _axis(doc, spec.get("vertical_axis", AXES[ndim - 1]), path + ("vertical_axis",), ndim)
    if lon == ver:
        raise doc.error(path + ("vertical_axis",), "must differ from longitudinal_axis")
    rails_raw = doc.get(spec, "rails", path, list)
    rails, layers, names = [], [], []
    for r, rs in enumerate(rails_raw):
        rp = path + ("rails", r)
        nodes = doc.get(rs, "rail_nodes", rp, list)
        if len(nodes) < 2:
            raise doc.error(rp + ("rail_nodes",), "need at least two rail-level nodes")
        for j, nid in enumerate(nodes):
            if nid not in model.nodes:
                raise doc.error(rp + ("rail_nodes", j), f"unknown node {nid}")
        xs = np.array([model.nodes[n].position[lon] for n in nodes])
        order = np.argsort(xs, kind="stable")
        nodes = [nodes[i] for i in order]
        xs = xs[order]
        if np.any(np.diff(xs) <= 0):
            raise doc.error(rp + ("rail_nodes",), "rail nodes must have distinct longitudinal positions")
        origin, length = float(xs[0]), float(xs[-1] - xs[0])
        try:
            rail = RailModel(length,
                             doc.get(rs, "flexural_rigidity", rp, float, check=POSITIVE),
                             doc.get(rs, "mass_per_length", rp, float, check=POSITIVE),
                             doc.get(rs, "n_modes", rp, int, DEFAULT_RAIL_MODES, POSITIVE),
                             doc.get(rs, "damping_ratio", rp, float, 0.0, NON_NEGATIVE),
                             origin)
        except InputError as exc:
            raise doc.error(rp, str(exc)) from None
        sl = doc.get(rs, "sleepers", rp, dict, {})
        sp = rp + ("sleepers",)
        ks = doc.get(sl, "stiffness", sp, float, DEFAULT_SLEEPER_STIFFNESS, NON_NEGATIVE)
        cs = doc.get(sl, "damping", sp, float, DEFAULT_SLEEPER_DAMPING, NON_NEGATIVE)
        positions = doc.get(sl, "positions_m", sp, list, None)
        # rail-level nodes whose vertical DOF is free
        free = [(n, x - origin) for n, x in zip(nodes, xs) if (n, ver) in model.dof_map]
        if positions is None:
            pos = np.array([x for _, x in free])
            attach = np.array([model.dof_map[(n, ver)] for n, _ in free], dtype=int)
        else:
            pos = np.array([doc.coerce(v, sp + ("positions_m", j), float)
                            for j, v in enumerate(positions)])
            rel = xs - origin
            attach = []
            for j, x in enumerate(pos):
                if x < 0 or x > length:
                    raise doc.error(sp + ("positions_m", j), "sleeper lies outside the rail span")
                nid = nodes[int(np.argmin(np.abs(rel - x)))]
                if (nid, ver) not in model.dof_map:
                    raise MappingError(
                        f"{format_path(sp + ('positions_m', j))}: nearest rail-level node {nid} "
                        "has a fixed vertical DOF")
                attach.append(model.dof_map[(nid, ver)])
            attach = np.array(attach, dtype=int)
        if len(pos) == 0:
            raise doc.error(sp, "rail has no sleepers on free DOFs")
        rails.append(rail)
        layers.append(InteractionLayer.uniform(pos, attach, ks, cs))
        names.append(rs.get("name", f"track-{r + 1}"))
    return TrackLayout(tuple(rails), tuple(layers), tuple(names), ver, lon)


def _build_reduction(doc, spec, path, model):
    pairs = []
    for j, item in enumerate(doc.get(spec, "master_dofs", path, list, [])):
        ip = path + ("master_dofs", j)
        if not (isinstance(item, list) and len(item) == 2):
            raise doc.error(ip, "expected [node, axis]")
        nid = doc.coerce(item[0], ip + (0,), int)
        ax = _axis(doc, item[1], ip + (1,), model.ndim)
        if (nid, ax) not in model.dof_map:
            raise doc.error(ip, f"node {nid} axis {AXES[ax]} is not a free DOF")
        pairs.append((nid, ax))
    auto = doc.get(spec, "auto_rail_level", path, bool, True)
    return ReductionSpec(tuple(pairs), auto)


# -- bridge model -------------------------------------------------------------
def resolve_builtin(ref, base=None):
    """Path for a file reference: builtin name, absolute path, or relative to ``base``."""
    if isinstance(ref, str) and ref in BUILTIN_FILES:
        return DATA_DIR / BUILTIN_FILES[ref]
    p = Path(ref)
    if not p.is_absolute() and base is not None:
        p = Path(base) / p
    return p


def load_bridge_model(ref, base=None):
    """Read a bridge model file (or builtin name such as ``reference-2d``)."""
    if isinstance(ref, dict):
        return bridge_model_from_document(Document(ref))
    return bridge_model_from_document(Document.load(resolve_builtin(ref, base)))


def bridge_model_from_dict(data):
    return bridge_model_from_document(Document(data))


def bridge_model_from_document(doc):
    d = doc.data
    root = ()
    if not isinstance(d, dict):
        raise doc.error(root, "top level must be an object")
    units = doc.get(d, "units", root, dict, SI_UNITS)
    for q, u in units.items():
        if q in SI_UNITS and u != SI_UNITS[q]:
            raise doc.error(("units", q), f"only SI is supported ({SI_UNITS[q]!r} expected)")
    raw_nodes = doc.get(d, "nodes", root, list)
    if not raw_nodes:
        raise doc.error(("nodes",), "model has no nodes")
    supports = {}
    for j, s in enumerate(doc.get(d, "supports", root, list)):
        sp = ("supports", j)
        nid = doc.get(s, "node", sp, int)
        fixed = doc.get(s, "fixed", sp, list)
        supports.setdefault(nid, set()).update(
            _axis(doc, a, sp + ("fixed", k), 3) for k, a in enumerate(fixed))
    nodes = []
    ndim = None
    for j, n in enumerate(raw_nodes):
        p = ("nodes", j)
        nid = doc.get(n, "id", p, int, check=NON_NEGATIVE)
        pos = doc.get(n, "position", p, list)
        if len(pos) not in (2, 3):
            raise doc.error(p + ("position",), "position needs 2 or 3 coordinates")
        pos = tuple(doc.coerce(v, p + ("position", k), float) for k, v in enumerate(pos))
        if ndim is None:
            ndim = len(pos)
        elif len(pos) != ndim:
            raise doc.error(p + ("position",), f"expected {ndim} coordinates like the first node")
        sup = tuple(ax in supports.get(nid, ()) for ax in range(ndim))
        nodes.append(Node(nid, pos, sup))
    node_ids = {n.id for n in nodes}
    for j, s in enumerate(d["supports"]):
        if s["node"] not in node_ids:
            raise doc.error(("supports", j, "node"), f"unknown node {s['node']}")
        bad = [a for a in supports[s["node"]] if a >= ndim]
        if bad:
            raise doc.error(("supports", j, "fixed"), f"axis {AXES[bad[0]]} in a {ndim}D model")
    members = []
    for j, m in enumerate(doc.get(d, "members", root, list)):
        p = ("members", j)
        kind = doc.get(m, "kind", p, str, "bar",
                       (lambda v: v in MEMBER_KINDS, f"kind must be one of {list(MEMBER_KINDS)}"))
        ni = doc.get(m, "node_i", p, int)
        nj = doc.get(m, "node_j", p, int)
        for key, nid in (("node_i", ni), ("node_j", nj)):
            if nid not in node_ids:
                raise doc.error(p + (key,), f"unknown node {nid}")
        sm = m.get("second_moment", 0.0)
        if isinstance(sm, list):
            sm = tuple(doc.coerce(v, p + ("second_moment", k), float) for k, v in enumerate(sm))
        else:
            sm = doc.coerce(sm, p + ("second_moment",), float, NON_NEGATIVE)
        try:
            members.append(Member(
                doc.get(m, "id", p, int, check=NON_NEGATIVE), ni, nj,
                doc.get(m, "elastic_modulus", p, float, check=POSITIVE),
                doc.get(m, "area", p, float, check=POSITIVE),
                doc.get(m, "density", p, float, check=NON_NEGATIVE),
                sm, kind,
                doc.get(m, "torsion_constant", p, float, None) if m.get("torsion_constant") is not None else None,
                doc.get(m, "poisson_ratio", p, float, 0.3),
                doc.get(m, "group", p, str, ""),
            ))
        except InputError:
            raise
        except SpanidError as exc:
            raise doc.error(p, str(exc)) from None
    masses = {}
    for j, nm in enumerate(doc.get(d, "nodal_masses", root, list, [])):
        p = ("nodal_masses", j)
        nid = doc.get(nm, "node", p, int)
        if nid not in node_ids:
            raise doc.error(p + ("node",), f"unknown node {nid}")
        masses[nid] = masses.get(nid, 0.0) + doc.get(nm, "mass_kg", p, float, check=NON_NEGATIVE)
    form = doc.get(doc.get(d, "mass", root, dict, {}), "formulation", ("mass",), str, "consistent",
                   (lambda v: v in ("consistent", "lumped"), "must be 'consistent' or 'lumped'"))
    dmp = doc.get(d, "damping", root, dict, {})
    dp = ("damping",)
    ratio = doc.get(dmp, "ratio", dp, float, 0.02, NON_NEGATIVE)
    modes = tuple(doc.get(dmp, "modes", dp, list, [1, 2]))
    if len(modes) != 2 or not all(isinstance(v, int) and v >= 1 for v in modes):
        raise doc.error(dp + ("modes",), "expected two 1-based mode numbers")
    wa = doc.get(dmp, "omega_a", dp, float, None) if "omega_a" in dmp else None
    wb = doc.get(dmp, "omega_b", dp, float, None) if "omega_b" in dmp else None
    if (wa is None) != (wb is None):
        raise doc.error(dp, "give both omega_a and omega_b or neither")
    if wa is not None and not 0 < wa < wb:
        raise doc.error(dp, "requires 0 < omega_a < omega_b")
    if wa is None and modes[0] == modes[1]:
        raise doc.error(dp + ("modes",), "anchor modes must differ")
    try:
        model = BridgeModel(nodes, members, lumped_mass=form == "lumped", nodal_masses=masses,
                            damping=DampingSpec(ratio, modes, wa, wb),
                            name=d.get("name", Path(doc.source).stem if doc.source else "bridge"))
    except InputError as exc:
        raise InputError(str(exc), source=doc.source) from None
    if "track" in d:
        model.track = _build_track(doc, doc.get(d, "track", root, dict), ("track",), model)
    if "reduction" in d:
        model.reduction = _build_reduction(doc, doc.get(d, "reduction", root, dict),
                                           ("reduction",), model)
    model.source = doc.source
    return model


# -- trains -------------------------------------------------------------------
def train_from_document(doc, path=(), track=0):
    d = doc.data
    for p in path:
        d = d[p]
    if not isinstance(d, dict):
        raise doc.error(path, "train must be an object")
    key = "velocity_mps" if "velocity_mps" in d else "velocity"
    if key not in d:
        raise doc.error(path + ("velocity_mps",), "required field missing")
    try:
        v = parse_velocity(d[key])
    except (TypeError, ValueError):
        raise doc.error(path + (key,), "velocity must be a number or '<value>mph' / '<value>mps'") from None
    if not v > 0:
        raise doc.error(path + (key,), "velocity must be > 0")
    entry = doc.get(d, "entry_time_s", path, float, 0.0)
    track = doc.get(d, "track", path, int, track, NON_NEGATIVE)
    axles = []
    for j, a in enumerate(doc.get(d, "axles", path, list)):
        p = path + ("axles", j)
        axles.append(Axle(doc.get(a, "mass_kg", p, float, check=NON_NEGATIVE),
                          doc.get(a, "load_n", p, float, check=NON_NEGATIVE),
                          doc.get(a, "offset_m", p, float)))
    offs = [a.offset for a in axles]
    if any(b <= a for a, b in zip(offs, offs[1:])):
        raise doc.error(path + ("axles",), "axle offsets must be strictly increasing")
    return TrainConfig(tuple(axles), v, entry, track)


def load_train(ref, base=None, track=0):
    if isinstance(ref, dict):
        return train_from_document(Document(ref), track=track)
    return train_from_document(Document.load(resolve_builtin(ref, base)), track=track)

