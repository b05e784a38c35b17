"""Benchmark problems: flower domains, a reentrant corner and a peak."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .geometry import Circle, Complement, Intersection, LevelSet, Union, Wedge, levelset_from_dict

R_FLOWER = 2.0
OMEGA_DEFAULT = 31 * np.pi / 16
OMEGA_ALT = 63 * np.pi / 32


class ProblemError(ValueError):
    pass


@dataclass
class BenchmarkSpec:
    """Level set, data and defaults for one benchmark.

    ``f`` and ``g`` are callables ``(x, y) -> array`` or scalars.  With
    ``f_nodal`` the discrete source is the nodal interpolant of ``f`` on the
    current mesh instead of ``f`` itself.
    """

    name: str
    levelset: LevelSet
    f: object
    g: object
    exact: Optional[Callable] = None
    grad_exact: Optional[Callable] = None
    singular_points: tuple = ()
    bbox: tuple = (-3.5, 3.5, -3.5, 3.5)
    n0: int = 16
    max_dofs: int = 7000
    max_steps: int = 100
    f_nodal: bool = False
    gh_mode: str = "linear"
    params: dict = field(default_factory=dict)

    def boundary_samples(self, n=100, seed=0):
        """``n`` points on the zero set of the level set (by bisection from
        random inside points outward along random rays)."""
        from .geometry import bisect_roots
        rng = np.random.default_rng(seed)
        x0, x1, y0, y1 = self.bbox
        pts = []
        while len(pts) < n:
            p = np.column_stack([rng.uniform(x0, x1, 4 * n), rng.uniform(y0, y1, 4 * n)])
            p = p[self.levelset.at(p) < 0]
            ang = rng.uniform(0, 2 * np.pi, len(p))
            far = p + 2 * max(x1 - x0, y1 - y0) * np.column_stack([np.cos(ang), np.sin(ang)])
            ok = self.levelset.at(far) > 0
            pts.extend(bisect_roots(self.levelset, p[ok], far[ok], 1e-14))
        return np.array(pts[:n])


def flower_centers(yi="cos"):
    """Petal centres and radius: radius ``r(cos(pi/8) + sin(pi/8))`` around
    the origin at angles ``i pi/4``, ``i = 1..8``."""
    if yi not in ("cos", "sin"):
        raise ProblemError(f"example1_yi must be 'cos' or 'sin', got {yi!r}")
    Rc = R_FLOWER * (np.cos(np.pi / 8) + np.sin(np.pi / 8))
    ri = np.sqrt(2.0) * Rc * np.sin(np.pi / 8)
    ang = np.arange(1, 9) * np.pi / 4
    xs = Rc * np.cos(ang)
    ys = Rc * (np.cos(ang) if yi == "cos" else np.sin(ang))
    return np.column_stack([xs, ys]), ri


def _petals(yi):
    centers, ri = flower_centers(yi)
    return [Circle(c, ri) for c in centers], centers, ri


def example1(yi="cos") -> BenchmarkSpec:
    """Flower: union of the disc of radius 2 and eight petals, g = 0, a
    piecewise constant source on a disc inside the first petal."""
    petals, centers, ri = _petals(yi)
    phi = Union(Circle((0.0, 0.0), R_FLOWER), *petals)
    cx, cy = centers[0]
    rad2 = ri * ri / 2.0

    def f(x, y):
        return np.where((x - cx) ** 2 + (y - cy) ** 2 < rad2, 10.0, 0.0)

    return BenchmarkSpec("example1", phi, f, 0.0, bbox=(-4.5, 4.5, -4.5, 4.5),
                         max_dofs=7000, params={"example1_yi": yi})


def example2(yi="cos") -> BenchmarkSpec:
    """Disc of radius 2 with the petal discs removed, f = 0, g = y^2."""
    petals, _, _ = _petals(yi)
    phi = Intersection(Circle((0.0, 0.0), R_FLOWER), *[Complement(p) for p in petals])
    return BenchmarkSpec("example2", phi, 0.0, lambda x, y: y * y,
                         bbox=(-3.5, 3.5, -3.5, 3.5), max_dofs=7000, params={"example1_yi": yi})


def _check_omega(omega):
    if not np.pi < omega < 2 * np.pi:
        raise ProblemError(f"omega={omega!r}: the corner angle must lie strictly between pi and 2*pi")


def corner_solution(omega):
    """``u = r^a sin(a theta)``, ``a = pi/omega``, and its gradient.

    The angle is measured in ``[omega/2 - pi, omega/2 + pi)`` so the branch
    cut runs through the middle of the excluded sector.
    """
    a = np.pi / omega
    lo = omega / 2 - np.pi

    def theta(x, y):
        return np.mod(np.arctan2(y, x) - lo, 2 * np.pi) + lo

    def u(x, y):
        r = np.hypot(x, y)
        return r ** a * np.sin(a * theta(x, y))

    def grad(x, y):
        r = np.hypot(x, y)
        t = theta(x, y)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(r > 0, a * r ** (a - 1), 0.0)
        return s * np.sin((a - 1) * t), s * np.cos((a - 1) * t)

    return u, grad, a


def corner_levelset(omega):
    return Intersection(Circle((0.0, 0.0), 1.0), Wedge((0.0, 0.0), omega))


def example3(omega=OMEGA_DEFAULT) -> BenchmarkSpec:
    _check_omega(omega)
    u, grad, a = corner_solution(omega)
    return BenchmarkSpec("example3", corner_levelset(omega), 0.0, u, exact=u, grad_exact=grad,
                         singular_points=((0.0, 0.0),), bbox=(-1.5, 1.5, -1.5, 1.5),
                         max_dofs=5000, params={"omega": float(omega), "alpha": a})


PEAK = (0.5, 0.5)


def peak(x, y):
    return np.exp(-100.0 * ((x - PEAK[0]) ** 2 + (y - PEAK[1]) ** 2))


def example4(omega=OMEGA_DEFAULT) -> BenchmarkSpec:
    """Corner singularity plus a Gaussian peak at (0.5, 0.5); f and g_h are
    nodal interpolants."""
    _check_omega(omega)
    uc, gc, a = corner_solution(omega)

    def u(x, y):
        return uc(x, y) + peak(x, y)

    def grad(x, y):
        gx, gy = gc(x, y)
        e = peak(x, y)
        return gx - 200.0 * (x - PEAK[0]) * e, gy - 200.0 * (y - PEAK[1]) * e

    def f(x, y):
        s = (x - PEAK[0]) ** 2 + (y - PEAK[1]) ** 2
        return peak(x, y) * (400.0 - 40000.0 * s)

    return BenchmarkSpec("example4", corner_levelset(omega), f, u, exact=u, grad_exact=grad,
                         singular_points=((0.0, 0.0),), bbox=(-1.5, 1.5, -1.5, 1.5),
                         max_dofs=7500, max_steps=50, f_nodal=True,
                         params={"omega": float(omega), "alpha": a})


def custom(levelset, f=0.0, g=0.0, bbox=(-3.5, 3.5, -3.5, 3.5), **kw) -> BenchmarkSpec:
    if isinstance(levelset, dict):
        levelset = levelset_from_dict(levelset)
    for name, v in (("f", f), ("g", g)):
        if not (np.isscalar(v) or callable(v)):
            raise ProblemError(f"custom {name} must be a number or a callable")
    return BenchmarkSpec("custom", levelset, f, g, bbox=tuple(bbox), **kw)


def get_example(k, **kw) -> BenchmarkSpec:
    builders = {1: example1, 2: example2, 3: example3, 4: example4}
    if k not in builders:
        raise ProblemError(f"unknown example {k!r}; choose 1, 2, 3 or 4")
    return builders[k](**kw)
