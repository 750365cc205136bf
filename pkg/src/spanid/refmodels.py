"""Generators for the shipped reference bridge models.

``reference_2d``: parallel-chord Pratt truss, 95 m span, 21 m deep, 9 panels,
20 nodes and 37 bar members, single track on the bottom chord.

``reference_3d``: two such trusses 10 m apart, joined by floor beams, top
struts, bottom X-bracing, top single-diagonal bracing and end portal
diagonals (40 nodes, 123 bar members). Track 1 runs over truss A, track 2
over truss B.

The JSON files under ``spanid/data`` are produced by :func:`write_reference_files`.
"""

import json
from pathlib import Path

from .coupling import parse_velocity

DATA_DIR = Path(__file__).parent / "data"

SPAN = 95.0
HEIGHT = 21.0
WIDTH = 10.0
PANELS = 9
STEEL = {"elastic_modulus": 200e9, "density": 7850.0}
AREAS = {
    "bottom_chord": 0.040,
    "top_chord": 0.045,
    "vertical": 0.015,
    "diagonal": 0.025,
    "floor_beam": 0.020,
    "top_strut": 0.008,
    "bottom_bracing": 0.006,
    "top_bracing": 0.004,
    "portal": 0.008,
}
DECK_MASS_PER_M = 2500.0  # kg/m per truss line, lumped at bottom-chord nodes
TOP_NODE_MASS = 1500.0
RAIL = {
    "flexural_rigidity": 2 * 200e9 * 3.95e-5,  # two 136RE rails
    "mass_per_length": 2 * 67.5,
    "n_modes": 5,
    "damping_ratio": 0.0,
    "sleepers": {"stiffness": 2.0e8, "damping": 5.0e4},
}


def _plane_truss(offset, y=None):
    """Nodes and members of one Pratt truss; node ids start at ``offset``."""
    dx = SPAN / PANELS
    nodes = []
    for i in range(PANELS + 1):
        nodes.append((offset + i, i * dx, 0.0))
    for i in range(PANELS + 1):
        nodes.append((offset + PANELS + 1 + i, i * dx, HEIGHT))
    b = lambda i: offset + i  # noqa: E731
    t = lambda i: offset + PANELS + 1 + i  # noqa: E731
    members = []
    members += [(b(i), b(i + 1), "bottom_chord") for i in range(PANELS)]
    members += [(t(i), t(i + 1), "top_chord") for i in range(PANELS)]
    members += [(b(i), t(i), "vertical") for i in range(PANELS + 1)]
    for i in range(PANELS):
        if i < PANELS // 2 + 1:
            members.append((t(i), b(i + 1), "diagonal"))
        else:
            members.append((b(i), t(i + 1), "diagonal"))
    return nodes, members


def _member_dict(idx, ni, nj, group):
    return {"id": idx, "node_i": ni, "node_j": nj, "kind": "bar", "group": group,
            "area": AREAS[group], **STEEL}


def reference_2d():
    raw_nodes, raw_members = _plane_truss(0)
    nodes = [{"id": i, "position": [x, z]} for i, x, z in raw_nodes]
    members = [_member_dict(k, a, b, g) for k, (a, b, g) in enumerate(raw_members)]
    dx = SPAN / PANELS
    masses = []
    for i in range(PANELS + 1):
        trib = dx / 2 if i in (0, PANELS) else dx
        masses.append({"node": i, "mass_kg": DECK_MASS_PER_M * trib})
    for i in range(PANELS + 1):
        masses.append({"node": PANELS + 1 + i, "mass_kg": TOP_NODE_MASS})
    return {
        "name": "reference-2d",
        "description": "Parallel-chord Pratt truss, 9 panels, 37 bar members",
        "units": {"length": "m", "mass": "kg", "time": "s", "force": "N", "stress": "Pa"},
        "nodes": nodes,
        "members": members,
        "supports": [{"node": 0, "fixed": ["x", "y"]}, {"node": PANELS, "fixed": ["y"]}],
        "nodal_masses": masses,
        "mass": {"formulation": "consistent"},
        "damping": {"ratio": 0.02, "modes": [1, 2]},
        "track": {
            "longitudinal_axis": "x",
            "vertical_axis": "y",
            "rails": [{"name": "track-1", "rail_nodes": list(range(PANELS + 1)), **RAIL}],
        },
        "reduction": {"auto_rail_level": True, "master_dofs": []},
    }


def reference_3d():
    na, ma = _plane_truss(0)
    nb, mb = _plane_truss(2 * (PANELS + 1))
    nodes = [{"id": i, "position": [x, 0.0, z]} for i, x, z in na]
    nodes += [{"id": i, "position": [x, WIDTH, z]} for i, x, z in nb]
    off = 2 * (PANELS + 1)
    b = lambda i, side=0: side * off + i  # noqa: E731
    t = lambda i, side=0: side * off + PANELS + 1 + i  # noqa: E731
    raw = [(a, c, g + "_A") for a, c, g in ma] + [(a, c, g + "_B") for a, c, g in mb]
    raw += [(b(i), b(i, 1), "floor_beam") for i in range(PANELS + 1)]
    raw += [(t(i), t(i, 1), "top_strut") for i in range(PANELS + 1)]
    for i in range(PANELS):
        raw.append((b(i), b(i + 1, 1), "bottom_bracing"))
        raw.append((b(i, 1), b(i + 1), "bottom_bracing"))
    for i in range(PANELS):
        if i % 2 == 0:
            raw.append((t(i), t(i + 1, 1), "top_bracing"))
        else:
            raw.append((t(i, 1), t(i + 1), "top_bracing"))
    raw.append((b(0), t(0, 1), "portal"))
    raw.append((b(PANELS), t(PANELS, 1), "portal"))
    members = []
    for k, (a, c, g) in enumerate(raw):
        base = g[:-2] if g.endswith(("_A", "_B")) else g
        d = _member_dict(k, a, c, base)
        d["group"] = g
        members.append(d)
    dx = SPAN / PANELS
    masses = []
    for side in (0, 1):
        for i in range(PANELS + 1):
            trib = dx / 2 if i in (0, PANELS) else dx
            masses.append({"node": b(i, side), "mass_kg": DECK_MASS_PER_M * trib})
            masses.append({"node": t(i, side), "mass_kg": TOP_NODE_MASS})
    masses.sort(key=lambda m: m["node"])
    master = []
    for side in (0, 1):
        for i in range(1, PANELS):
            master.append([b(i, side), "y"])
            master.append([t(i, side), "y"])
            master.append([t(i, side), "z"])
    return {
        "name": "reference-3d",
        "description": "Two Pratt trusses with floor beams and bracing, 123 bar members",
        "units": {"length": "m", "mass": "kg", "time": "s", "force": "N", "stress": "Pa"},
        "nodes": nodes,
        "members": members,
        "supports": [
            {"node": b(0), "fixed": ["x", "y", "z"]},
            {"node": b(PANELS), "fixed": ["y", "z"]},
            {"node": b(0, 1), "fixed": ["z"]},
            {"node": b(PANELS, 1), "fixed": ["z"]},
        ],
        "nodal_masses": masses,
        "mass": {"formulation": "consistent"},
        "damping": {"ratio": 0.02, "modes": [1, 2]},
        "track": {
            "longitudinal_axis": "x",
            "vertical_axis": "z",
            "rails": [
                {"name": "track-1", "rail_nodes": [b(i) for i in range(PANELS + 1)], **RAIL},
                {"name": "track-2", "rail_nodes": [b(i, 1) for i in range(PANELS + 1)], **RAIL},
            ],
        },
        "reduction": {"auto_rail_level": True, "master_dofs": master},
    }


def freight_train(n_cars=2, velocity="50mph", axle_mass=32000.0, g=9.81):
    """Locomotive (6 axles) plus ``n_cars`` four-axle cars; offsets from the lead axle."""
    offsets = [0.0, 2.0, 4.0, 14.0, 16.0, 18.0]
    pos = 22.0 + 1.0
    for _ in range(n_cars):
        offsets += [pos, pos + 1.8, pos + 13.0, pos + 14.8]
        pos += 17.0
    axles = [{"mass_kg": axle_mass, "load_n": axle_mass * g, "offset_m": round(o, 3)} for o in offsets]
    return {"velocity_mps": round(parse_velocity(velocity), 6), "entry_time_s": 0.0, "axles": axles}


def write_reference_files(directory=DATA_DIR):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {
        "reference_2d.json": reference_2d(),
        "reference_3d.json": reference_3d(),
        "train_50mph.json": freight_train(2, "50mph"),
        "train_80mph.json": freight_train(2, "80mph"),
    }
    for name, doc in files.items():
        (directory / name).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    return [directory / n for n in files]


if __name__ == "__main__":  # pragma: no cover
    for p in write_reference_files():
        print(p)
