"""Run configuration files, convergence CSV and legacy VTK output."""
from __future__ import annotations

import csv
import json
import math
import os

import numpy as np

from .amr import RECORD_COLUMNS, AmrConfig, ConfigError
from .geometry import GeometryError
from .problems import ProblemError, custom, get_example

CSV_HEADER = ("step,ndof,eta,eta_residual,eta_jump,eta_nitsche,eta_bc,"
              "true_error,effectivity,osc,cg_iters,cond_est,wall_s")
assert CSV_HEADER.split(",") == RECORD_COLUMNS

CONFIG_KEYS = {
    "example", "n0", "bbox", "theta", "beta", "gamma", "max_dofs", "max_steps", "with_bc",
    "gh_mode", "uniform", "omega", "vtk_every", "seed-free", "example1_yi", "marking",
    "record_timing", "levelset", "f", "g",
}


def _fmt(v):
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def write_csv(records, path):
    """One row per record, fixed column order, shortest round-trip floats."""
    with open(path, "w", newline="", encoding="ascii") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in records:
            fh.write(",".join(_fmt(getattr(r, c)) for c in RECORD_COLUMNS) + "\n")


def read_csv(path):
    with open(path, newline="", encoding="ascii") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        out.append({k: (int(v) if k in ("step", "ndof", "cg_iters") else float(v)) for k, v in row.items()})
    return out


def write_vtk(path, mesh, cell_data=None, point_data=None, title="cutfem-amr mesh"):
    """Legacy ASCII VTK 3.0 unstructured grid of triangles."""
    nv, nt = mesh.nvertices, mesh.ntriangles
    lines = ["# vtk DataFile Version 3.0", title[:255], "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {nv} double"]
    lines += [f"{x!r} {y!r} 0.0" for x, y in mesh.vertices.tolist()]
    lines.append(f"CELLS {nt} {4 * nt}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles.tolist()]
    lines.append(f"CELL_TYPES {nt}")
    lines += ["5"] * nt
    for label, data, n in (("CELL_DATA", cell_data, nt), ("POINT_DATA", point_data, nv)):
        if not data:
            continue
        lines.append(f"{label} {n}")
        for name, vals in data.items():
            vals = np.asarray(vals)
            if vals.shape != (n,):
                raise ValueError(f"field {name!r} has shape {vals.shape}, expected ({n},)")
            if np.issubdtype(vals.dtype, np.integer):
                lines += [f"SCALARS {name} int 1", "LOOKUP_TABLE default"]
                lines += [str(int(v)) for v in vals]
            else:
                lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
                lines += [_fmt(v) for v in vals]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def write_step_vtk(path, state):
    mesh = state["mesh"]
    cut = state["cut"]
    ind = state["indicators"]
    sol = state["solution"]
    write_vtk(path, mesh,
              cell_data={"classification": np.asarray(cut.classification, dtype=np.int64),
                         "eta": ind.eta_K, "eta_bc": np.sqrt(ind.bc_sq),
                         "eta_residual": np.sqrt(ind.residual_sq), "eta_jump": np.sqrt(ind.jump_sq),
                         "eta_nitsche": np.sqrt(ind.nitsche_sq)},
              point_data={"u_h": sol.nodal})


def load_config(path):
    """Parse a run configuration and return ``(problem, AmrConfig, options)``.

    Raises ``ConfigError`` for unreadable files, unknown keys and bad values.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return config_from_dict(doc)


def config_from_dict(doc):
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if "example" not in doc:
        raise ConfigError("config needs an 'example' entry (1-4 or \"custom\")")
    ex = doc["example"]
    try:
        if ex == "custom":
            if "levelset" not in doc:
                raise ConfigError("custom example needs a 'levelset'")
            kw = {"bbox": doc["bbox"]} if "bbox" in doc else {}
            problem = custom(doc["levelset"], doc.get("f", 0.0), doc.get("g", 0.0), **kw)
        else:
            for key in ("levelset", "f", "g"):
                if key in doc:
                    raise ConfigError(f"'{key}' is only allowed with \"example\": \"custom\"")
            if isinstance(ex, bool) or not isinstance(ex, int):
                raise ConfigError(f"example must be 1, 2, 3, 4 or \"custom\", got {ex!r}")
            kw = {}
            if "omega" in doc:
                if ex not in (3, 4):
                    raise ConfigError("omega applies to examples 3 and 4 only")
                kw["omega"] = float(doc["omega"])
            if "example1_yi" in doc:
                if ex not in (1, 2):
                    raise ConfigError("example1_yi applies to examples 1 and 2 only")
                kw["yi"] = doc["example1_yi"]
            problem = get_example(ex, **kw)
    except (ProblemError, GeometryError, KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from None

    cfg = AmrConfig()
    for key in ("theta", "beta", "gamma"):
        if key in doc:
            setattr(cfg, key, _number(doc, key))
    for key in ("max_dofs", "max_steps", "n0"):
        if key in doc:
            setattr(cfg, key, _integer(doc, key))
    for key in ("with_bc", "uniform", "record_timing"):
        if key in doc:
            if not isinstance(doc[key], bool):
                raise ConfigError(f"{key} must be true or false")
            setattr(cfg, key, doc[key])
    if "gh_mode" in doc:
        cfg.gh_mode = doc["gh_mode"]
    if "marking" in doc:
        cfg.marking = doc["marking"]
    if "bbox" in doc:
        b = doc["bbox"]
        if not (isinstance(b, list) and len(b) == 4):
            raise ConfigError("bbox must be [xmin, xmax, ymin, ymax]")
        cfg.bbox = tuple(float(v) for v in b)
    cfg.validate()
    opts = {"vtk_every": _integer(doc, "vtk_every") if "vtk_every" in doc else 0}
    if opts["vtk_every"] < 0:
        raise ConfigError("vtk_every must be non-negative")
    return problem, cfg, opts


def _number(doc, key):
    v = doc[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{key} must be a number")
    return float(v)


def _integer(doc, key):
    v = doc[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{key} must be an integer")
    return v


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
