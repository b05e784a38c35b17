"""Solve, estimate, mark, refine."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from .assembly import BoundaryData, FeSpace, P1Field, SolverError, assemble, energy_error, solve
from .estimator import IndicatorField, build_bc_mesh, compute_indicators, oscillation
from .geometry import interpolate_levelset
from .mesh import build_background_mesh, extract_active, refine
from .problems import BenchmarkSpec


class ConfigError(ValueError):
    pass


class RateUndefinedError(ValueError):
    pass


@dataclass
class AmrConfig:
    theta: float = 0.1
    max_dofs: Optional[int] = None
    max_steps: Optional[int] = None
    with_bc: bool = True
    beta: float = 10.0
    gamma: float = 0.1
    tol: float = 1e-10
    gh_mode: Optional[str] = None
    uniform: bool = False
    marking: str = "dorfler"
    n0: Optional[int] = None
    bbox: Optional[tuple] = None
    record_timing: bool = True

    def validate(self):
        if not 0 < self.theta <= 1:
            raise ConfigError(f"theta must lie in (0, 1], got {self.theta}")
        if self.marking not in ("dorfler", "fraction"):
            raise ConfigError(f"unknown marking {self.marking!r}")
        if self.max_dofs is not None and self.max_dofs < 1:
            raise ConfigError("max_dofs must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be positive")
        if self.gh_mode not in (None, "linear", "constant"):
            raise ConfigError(f"gh_mode must be 'linear' or 'constant', got {self.gh_mode!r}")
        if not self.beta > 0 or self.gamma < 0 or not self.tol > 0:
            raise ConfigError("need beta > 0, gamma >= 0 and tol > 0")
        if self.n0 is not None and self.n0 < 1:
            raise ConfigError("n0 must be positive")
        if self.bbox is not None:
            x0, x1, y0, y1 = self.bbox
            if not (x1 > x0 and y1 > y0):
                raise ConfigError(f"bad bbox {self.bbox!r}")
        return self


@dataclass
class AmrRecord:
    step: int
    ndof: int
    eta: float
    eta_residual: float
    eta_jump: float
    eta_nitsche: float
    eta_bc: float
    true_error: float
    effectivity: float
    osc: float
    cg_iters: int
    cond_est: float
    wall_s: float
    diagnostics: dict = field(default_factory=dict, compare=False)


RECORD_COLUMNS = [f.name for f in fields(AmrRecord) if f.name != "diagnostics"]


class AmrHistory(list):
    """Records of one run plus the final state and an exit status."""

    status = "ok"
    error: Optional[Exception] = None
    mesh = None
    cut = None
    space = None
    solution = None
    indicators = None
    bc_mesh = None


def _order(eta2):
    # descending, ties by ascending element index
    return np.lexsort((np.arange(len(eta2)), -eta2))


def dorfler_mark(indicators, theta):
    """Smallest prefix of the elements sorted by ``eta_K`` whose squared sum
    reaches ``theta`` times the total."""
    if not 0 < theta <= 1:
        raise ConfigError(f"theta must lie in (0, 1], got {theta}")
    eta = indicators.eta_K if isinstance(indicators, IndicatorField) else np.asarray(indicators, float)
    eta2 = eta * eta
    if not np.any(eta2 > 0):
        return np.zeros(0, dtype=np.int64)
    order = _order(eta2)
    if theta == 1:
        return np.sort(order[eta2[order] > 0])
    cums = np.cumsum(eta2[order])
    k = int(np.searchsorted(cums, theta * cums[-1], side="left")) + 1
    return np.sort(order[:k])


def fraction_mark(indicators, fraction):
    """The ``ceil(fraction * n)`` largest indicators among the positive ones."""
    eta = indicators.eta_K if isinstance(indicators, IndicatorField) else np.asarray(indicators, float)
    eta2 = eta * eta
    npos = int(np.count_nonzero(eta2 > 0))
    if npos == 0:
        return np.zeros(0, dtype=np.int64)
    k = min(npos, max(1, math.ceil(fraction * npos)))
    return np.sort(_order(eta2)[:k])


def _discrete_source(problem, mesh):
    if problem.f_nodal and not np.isscalar(problem.f):
        v = mesh.vertices
        return P1Field(problem.f(v[:, 0], v[:, 1]))
    return problem.f


def adapt(problem: BenchmarkSpec, config: AmrConfig | None = None,
          on_step: Callable | None = None) -> AmrHistory:
    """Adaptive loop.  Stops when the next system would exceed ``max_dofs``,
    after ``max_steps`` records, or when ``eta`` vanishes.

    ``on_step(record, state)`` is called after every record with a dict
    holding the mesh, cut topology, solution and indicators.
    """
    config = (config or AmrConfig()).validate()
    max_dofs = config.max_dofs if config.max_dofs is not None else problem.max_dofs
    max_steps = config.max_steps if config.max_steps is not None else problem.max_steps
    gh_mode = config.gh_mode or problem.gh_mode
    n0 = config.n0 or problem.n0
    bbox = tuple(config.bbox) if config.bbox is not None else problem.bbox
    phi = problem.levelset

    mesh = build_background_mesh(bbox, n0)
    cut = extract_active(mesh, interpolate_levelset(phi, mesh))
    hist = AmrHistory()
    for step in range(max_steps):
        t0 = time.perf_counter()
        space = FeSpace.from_cut(cut)
        if space.ndofs > max_dofs:
            if step == 0:
                raise ConfigError(f"initial mesh already has {space.ndofs} dofs > max_dofs={max_dofs}")
            break
        f_h = _discrete_source(problem, mesh)
        g_h = BoundaryData(problem.g, gh_mode)
        system = assemble(space, cut, f_h, g_h, beta=config.beta, gamma=config.gamma)
        try:
            sol = solve(system, tol=config.tol)
        except SolverError as exc:
            hist.status = "solver_failed"
            hist.error = exc
            break
        bc = build_bc_mesh(cut, phi, sol, problem.g)
        ind = compute_indicators(space, sol, f_h, g_h, bc, with_bc=config.with_bc)
        if problem.grad_exact is not None:
            err = energy_error(sol, problem.grad_exact, space, bc, problem.singular_points, phi=phi)
        else:
            err = math.nan
        eff = ind.eta / err if err > 0 else math.nan
        osc = oscillation(space, problem.f, bc)
        wall = time.perf_counter() - t0 if config.record_timing else math.nan
        diag = dict(cut.diagnostics)
        diag.update({f"bc_{k}": v for k, v in bc.diagnostics.items()})
        diag.update(system.diagnostics)
        rec = AmrRecord(step=step, ndof=space.ndofs, eta=ind.eta,
                        eta_residual=ind.component("residual"), eta_jump=ind.component("jump"),
                        eta_nitsche=ind.component("nitsche"), eta_bc=ind.component("bc"),
                        true_error=err, effectivity=eff, osc=osc, cg_iters=sol.iterations,
                        cond_est=sol.cond_est, wall_s=wall, diagnostics=diag)
        hist.append(rec)
        hist.mesh, hist.cut, hist.space, hist.solution = mesh, cut, space, sol
        hist.indicators, hist.bc_mesh = ind, bc
        if on_step is not None:
            on_step(rec, {"mesh": mesh, "cut": cut, "solution": sol, "indicators": ind, "bc_mesh": bc})
        if ind.eta == 0.0 or step + 1 == max_steps:
            break
        if config.uniform:
            # two bisection sweeps halve every edge, so dofs grow about 4x
            mesh = refine(mesh, np.arange(mesh.ntriangles))
            mesh = refine(mesh, np.arange(mesh.ntriangles))
            cut = extract_active(mesh, interpolate_levelset(phi, mesh))
            continue
        if config.marking == "fraction":
            marked = fraction_mark(ind, config.theta)
        else:
            marked = dorfler_mark(ind, config.theta)
        mesh, cut = _refine_until_new_dofs(mesh, marked, phi, space.ndofs)
    return hist


def _refine_until_new_dofs(mesh, marked, phi, ndofs, max_sweeps=8):
    """Refine ``marked``; if only outside vertices appear, keep bisecting
    the children of the marked elements so every step adds active dofs."""
    for _ in range(max_sweeps):
        new = refine(mesh, marked)
        cut = extract_active(new, interpolate_levelset(phi, new))
        if FeSpace.from_cut(cut).ndofs > ndofs:
            return new, cut
        was_marked = np.zeros(mesh.ntriangles, dtype=bool)
        was_marked[marked] = True
        marked = np.flatnonzero(was_marked[new.parent])
        mesh = new
    return new, cut


def fit_rate(records, field_name="eta", window=6):
    """Least-squares slope of ``log(field)`` against ``log(ndof)`` over the
    last ``window`` records."""
    recs = list(records)[-window:]
    if len(recs) < 3 or window < 3:
        raise RateUndefinedError("need at least 3 records to fit a rate")
    n = np.array([r.ndof if hasattr(r, "ndof") else r["ndof"] for r in recs], dtype=float)
    v = np.array([getattr(r, field_name) if hasattr(r, field_name) else r[field_name] for r in recs],
                 dtype=float)
    if not np.all(np.isfinite(v)) or np.any(v <= 0):
        raise RateUndefinedError(f"{field_name} must be positive to fit a rate")
    return float(np.polyfit(np.log(n), np.log(v), 1)[0])
