"""Level-set geometry, its piecewise linear approximation, cut-cell clipping
and the quadrature rules used on clipped cells and boundary segments.

Sign convention throughout: ``phi < 0`` inside the domain, ``phi > 0``
outside.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import _kernels


class GeometryError(ValueError):
    """Invalid geometric input."""


class DegenerateCutError(GeometryError):
    """All nodal values of an element vanish after snapping."""


class Classification(IntEnum):
    OUTSIDE = _kernels.OUTSIDE
    INSIDE = _kernels.INSIDE
    CUT = _kernels.CUT


# ---------------------------------------------------------------------------
# level sets
# ---------------------------------------------------------------------------

class LevelSet:
    """Base class of the level-set composition tree.

    Subclasses implement :meth:`evaluate` on coordinate arrays; instances are
    immutable and callable as ``phi(x, y)``.
    """

    def evaluate(self, x, y):
        raise NotImplementedError

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return self.evaluate(x, y)

    def at(self, pts):
        """Evaluate at an ``(..., 2)`` array of points."""
        pts = np.asarray(pts, dtype=float)
        return self(pts[..., 0], pts[..., 1])

    def translate(self, dx, dy):
        return Translated(self, (dx, dy))

    def to_dict(self):
        raise NotImplementedError


class Circle(LevelSet):
    """``|x - c|^2 - r^2`` (not a signed distance)."""

    def __init__(self, center, radius):
        self.center = (float(center[0]), float(center[1]))
        self.radius = float(radius)
        if not self.radius > 0:
            raise GeometryError("circle radius must be positive")

    def evaluate(self, x, y):
        cx, cy = self.center
        return (x - cx) ** 2 + (y - cy) ** 2 - self.radius ** 2

    def to_dict(self):
        return {"circle": {"center": list(self.center), "radius": self.radius}}


class HalfPlane(LevelSet):
    """``(x - p) . n`` with ``n`` the unit outward normal."""

    def __init__(self, point, normal):
        nx, ny = float(normal[0]), float(normal[1])
        nrm = np.hypot(nx, ny)
        if nrm == 0:
            raise GeometryError("half-plane normal must be nonzero")
        self.point = (float(point[0]), float(point[1]))
        self.normal = (nx / nrm, ny / nrm)

    def evaluate(self, x, y):
        px, py = self.point
        nx, ny = self.normal
        return (x - px) * nx + (y - py) * ny

    def to_dict(self):
        return {"half_plane": {"point": list(self.point), "normal": list(self.normal)}}


class Wedge(LevelSet):
    """Sector of opening ``angle`` at ``apex``, counter-clockwise from ``start``.

    Built from the two bounding half-planes: their intersection for convex
    sectors and their union for reflex ones.
    """

    def __init__(self, apex, angle, start=0.0):
        self.apex = (float(apex[0]), float(apex[1]))
        self.angle = float(angle)
        self.start = float(start)
        if not 0 < self.angle < 2 * np.pi:
            raise GeometryError("wedge angle must lie in (0, 2*pi)")
        if self.start == 0.0:
            c0, s0 = 1.0, 0.0
        else:
            c0, s0 = np.cos(self.start), np.sin(self.start)
        c1, s1 = np.cos(self.start + self.angle), np.sin(self.start + self.angle)
        self._e0 = (c0, s0)
        self._e1 = (c1, s1)

    def evaluate(self, x, y):
        dx = x - self.apex[0]
        dy = y - self.apex[1]
        # left of the start ray, right of the end ray
        f0 = -(self._e0[0] * dy - self._e0[1] * dx)
        f1 = self._e1[0] * dy - self._e1[1] * dx
        if self.angle > np.pi:
            return np.minimum(f0, f1)
        return np.maximum(f0, f1)

    def to_dict(self):
        return {"wedge": {"apex": list(self.apex), "angle": self.angle, "start": self.start}}


class Union(LevelSet):
    """Pointwise minimum: union of the insides."""

    def __init__(self, *parts):
        if not parts:
            raise GeometryError("union needs at least one operand")
        self.parts = tuple(parts)

    def evaluate(self, x, y):
        out = self.parts[0].evaluate(x, y)
        for p in self.parts[1:]:
            out = np.minimum(out, p.evaluate(x, y))
        return out

    def to_dict(self):
        return {"min": [p.to_dict() for p in self.parts]}


class Intersection(LevelSet):
    """Pointwise maximum: intersection of the insides."""

    def __init__(self, *parts):
        if not parts:
            raise GeometryError("intersection needs at least one operand")
        self.parts = tuple(parts)

    def evaluate(self, x, y):
        out = self.parts[0].evaluate(x, y)
        for p in self.parts[1:]:
            out = np.maximum(out, p.evaluate(x, y))
        return out

    def to_dict(self):
        return {"max": [p.to_dict() for p in self.parts]}


class Complement(LevelSet):
    def __init__(self, part):
        self.part = part

    def evaluate(self, x, y):
        return -self.part.evaluate(x, y)

    def to_dict(self):
        return {"neg": self.part.to_dict()}


class Translated(LevelSet):
    def __init__(self, part, shift):
        self.part = part
        self.shift = (float(shift[0]), float(shift[1]))

    def evaluate(self, x, y):
        return self.part.evaluate(x - self.shift[0], y - self.shift[1])

    def to_dict(self):
        return {"translate": {"shift": list(self.shift), "of": self.part.to_dict()}}


class Linear(LevelSet):
    """``a*x + b*y + c``; mostly for tests and patch problems."""

    def __init__(self, a, b, c):
        self.coef = (float(a), float(b), float(c))

    def evaluate(self, x, y):
        a, b, c = self.coef
        return a * x + b * y + c

    def to_dict(self):
        return {"linear": list(self.coef)}


class Callable(LevelSet):
    """Wrap an arbitrary vectorised ``f(x, y)``."""

    def __init__(self, fn):
        self.fn = fn

    def evaluate(self, x, y):
        return np.asarray(self.fn(x, y), dtype=float) + 0.0 * x

    def to_dict(self):
        raise GeometryError("callable level sets cannot be serialised")


def levelset_from_dict(d) -> LevelSet:
    """Rebuild a level set from the JSON composition language."""
    if not isinstance(d, dict) or len(d) != 1:
        raise GeometryError(f"bad level-set node: {d!r}")
    (key, val), = d.items()
    if key == "circle":
        return Circle(val["center"], val["radius"])
    if key == "half_plane":
        return HalfPlane(val["point"], val["normal"])
    if key == "wedge":
        return Wedge(val["apex"], val["angle"], val.get("start", 0.0))
    if key == "linear":
        return Linear(*val)
    if key == "min":
        return Union(*[levelset_from_dict(v) for v in val])
    if key == "max":
        return Intersection(*[levelset_from_dict(v) for v in val])
    if key == "neg":
        return Complement(levelset_from_dict(val))
    if key == "translate":
        return Translated(levelset_from_dict(val["of"]), val["shift"])
    raise GeometryError(f"unknown level-set primitive {key!r}")


def numerical_gradient(phi, pts, step):
    """Central-difference gradient of ``phi`` at ``pts`` (``(m, 2)``)."""
    pts = np.asarray(pts, dtype=float)
    step = np.broadcast_to(np.asarray(step, dtype=float), pts.shape[:-1])
    gx = (phi(pts[..., 0] + step, pts[..., 1]) - phi(pts[..., 0] - step, pts[..., 1])) / (2 * step)
    gy = (phi(pts[..., 0], pts[..., 1] + step) - phi(pts[..., 0], pts[..., 1] - step)) / (2 * step)
    return np.stack([gx, gy], axis=-1)


# ---------------------------------------------------------------------------
# nodal interpolation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NodalField:
    """One value per mesh vertex; the P1 interpolant defines ``phi_h``."""

    values: np.ndarray
    mesh: object

    def __post_init__(self):
        if len(self.values) != self.mesh.nvertices:
            raise GeometryError("nodal field length does not match the vertex count")


def interpolate_levelset(phi: LevelSet, mesh) -> NodalField:
    vals = np.asarray(phi(mesh.vertices[:, 0], mesh.vertices[:, 1]), dtype=float)
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        v = int(bad[0])
        raise GeometryError(
            f"level set is not finite at vertex {v} {tuple(mesh.vertices[v])}")
    vals.setflags(write=False)
    return NodalField(vals, mesh)


def snap_tolerance(diameter):
    return 1e-12 * np.asarray(diameter, dtype=float)


# ---------------------------------------------------------------------------
# single-element clipping
# ---------------------------------------------------------------------------

@dataclass
class ClipResult:
    classification: Classification
    inside_polygon: np.ndarray
    # (a, b, unit normal) of K cap {phi_h = 0}, or None
    boundary_segment: tuple | None
    # per local facet k = (v_k, v_{k+1}): (start, end) of F cap Omega_h or None
    facet_portions: list

    @property
    def boundary_length(self):
        if self.boundary_segment is None:
            return 0.0
        a, b, _ = self.boundary_segment
        return float(np.hypot(*(b - a)))


def p1_gradients(xy):
    """Gradients of the three hat functions on each triangle.

    ``xy`` has shape ``(n, 3, 2)``; returns ``(grads (n, 3, 2), area (n,))``.
    """
    xy = np.asarray(xy, dtype=float)
    d1 = xy[:, 1] - xy[:, 0]
    d2 = xy[:, 2] - xy[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    g = np.empty(xy.shape)
    # grad lambda_i is the inward normal of the opposite edge over 2*area
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        e = xy[:, k] - xy[:, j]
        g[:, i, 0] = -e[:, 1] / det
        g[:, i, 1] = e[:, 0] / det
    return g, 0.5 * det


def barycentric(xy, pts):
    """Barycentric coordinates of ``pts`` (``(n, q, 2)``) in triangles ``xy``."""
    g, _ = p1_gradients(xy)
    rel = pts - xy[:, None, 0, :]
    lam1 = np.einsum("nqd,nd->nq", rel, g[:, 1])
    lam2 = np.einsum("nqd,nd->nq", rel, g[:, 2])
    return np.stack([1.0 - lam1 - lam2, lam1, lam2], axis=-1)


def polygon_area(poly):
    poly = np.asarray(poly, dtype=float)
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def classify_and_clip(K, phih, snap_tol=None) -> ClipResult:
    """Classify triangle ``K`` (``(3, 2)``) against linear nodal values."""
    K = np.asarray(K, dtype=float).reshape(3, 2)
    vals = np.asarray(phih, dtype=float).copy()
    if snap_tol is None:
        diam = max(np.hypot(*(K[i] - K[(i + 1) % 3])) for i in range(3))
        snap_tol = snap_tolerance(diam)
    vals[np.abs(vals) < snap_tol] = 0.0
    cls, poly, npoly, zpts, nz = _kernels.clip_triangles(
        K[None], vals[None], np.arange(3)[None])
    c = int(cls[0])
    if c == _kernels.DEGENERATE:
        raise DegenerateCutError("all nodal level-set values vanish on the element")
    seg = None
    if c == _kernels.CUT:
        g, _ = p1_gradients(K[None])
        grad = vals @ g[0]
        n = grad / np.hypot(*grad)
        seg = (zpts[0, 0].copy(), zpts[0, 1].copy(), n)
    return ClipResult(
        classification=Classification(c),
        inside_polygon=poly[0, : npoly[0]].copy(),
        boundary_segment=seg,
        facet_portions=_facet_portions(K, vals),
    )


def _facet_portions(K, vals):
    out = []
    for i in range(3):
        j = (i + 1) % 3
        a, b = vals[i], vals[j]
        if a <= 0 and b <= 0:
            out.append((K[i].copy(), K[j].copy()))
        elif a > 0 and b > 0:
            out.append(None)
        elif a * b < 0:
            t = a / (a - b)
            r = K[i] + t * (K[j] - K[i])
            out.append((K[i].copy(), r) if a < 0 else (r, K[j].copy()))
        else:
            # one endpoint zero, the other positive: only a point remains
            out.append(None)
    return out


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

def _sym_rule(groups):
    bary, w = [], []
    for weight, pts in groups:
        for p in pts:
            bary.append(p)
            w.append(weight)
    return np.array(bary), np.array(w)


def _orbit3(a):
    b = 1.0 - 2.0 * a
    return [(a, a, b), (a, b, a), (b, a, a)]


_D4 = [(0.223381589678011, _orbit3(0.445948490915965)),
       (0.109951743655322, _orbit3(0.091576213509771))]

TRIANGLE_RULES = {
    1: _sym_rule([(1.0, [(1 / 3, 1 / 3, 1 / 3)])]),
    2: _sym_rule([(1 / 3, _orbit3(1 / 6))]),
    3: _sym_rule(_D4),
    4: _sym_rule(_D4),
    5: _sym_rule([(0.225, [(1 / 3, 1 / 3, 1 / 3)]),
                  (0.132394152788506, _orbit3(0.470142064105115)),
                  (0.125939180544827, _orbit3(0.101286507323456))]),
}


def triangle_rule(order):
    """Symmetric rule on the reference simplex: barycentric points and
    weights summing to one."""
    if order not in TRIANGLE_RULES:
        raise GeometryError(f"triangle rule order must be in 1..5, got {order}")
    return TRIANGLE_RULES[order]


def quadrature_triangles(tris, order):
    """Map a triangle rule onto each of ``tris`` (``(m, 3, 2)``).

    Returns points ``(m, q, 2)`` and weights ``(m, q)``; weights carry the
    (absolute) triangle area.
    """
    tris = np.asarray(tris, dtype=float)
    bary, w = triangle_rule(order)
    pts = np.einsum("qi,mid->mqd", bary, tris)
    d1 = tris[:, 1] - tris[:, 0]
    d2 = tris[:, 2] - tris[:, 0]
    area = 0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    return pts, area[:, None] * w[None, :]


def fan_triangles(poly, npoly):
    """Fan-triangulate padded convex polygons from vertex 0.

    ``poly`` is ``(n, 4, 2)``, ``npoly`` the vertex counts (3 or 4; anything
    smaller yields no triangles).  Returns ``(tris (m, 3, 2), parent (m,))``.
    """
    poly = np.asarray(poly)
    npoly = np.asarray(npoly)
    first = np.flatnonzero(npoly >= 3)
    second = np.flatnonzero(npoly >= 4)
    t1 = poly[first][:, [0, 1, 2]]
    t2 = poly[second][:, [0, 2, 3]]
    tris = np.concatenate([t1, t2], axis=0)
    parent = np.concatenate([first, second])
    order = np.argsort(parent, kind="stable")
    return tris[order], parent[order]


def quadrature_polygon(poly, order):
    """Quadrature on a convex polygon with 3 or 4 vertices.

    Returns ``(points (k, 2), weights (k,))``; a degenerate polygon (area
    below 1e-14) yields empty arrays.
    """
    poly = np.asarray(poly, dtype=float)
    if poly.shape[0] < 3 or abs(polygon_area(poly)) < 1e-14:
        return np.zeros((0, 2)), np.zeros(0)
    if poly.shape[0] > 4:
        raise GeometryError("only 3- or 4-vertex polygons are supported")
    tris = [poly[[0, 1, 2]]]
    if poly.shape[0] == 4:
        tris.append(poly[[0, 2, 3]])
    pts, w = quadrature_triangles(np.array(tris), order)
    return pts.reshape(-1, 2), w.reshape(-1)


def gauss_legendre(order):
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1.0), 0.5 * w


def segment_rule(a, b, order):
    """Vectorised Gauss-Legendre on segments ``a -> b`` (``(m, 2)`` each).

    Returns points ``(m, q, 2)`` and weights ``(m, q)`` summing to the length.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    t, w = gauss_legendre(order)
    pts = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    length = np.hypot(*(b - a).T)
    return pts, length[:, None] * w[None, :]


def quadrature_segment(a, b, order):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.allclose(a, b, rtol=0, atol=0):
        raise GeometryError("segment endpoints coincide")
    pts, w = segment_rule(a[None], b[None], order)
    return pts[0], w[0]


# ---------------------------------------------------------------------------
# root finding on the exact level set
# ---------------------------------------------------------------------------

def bisect_roots(phi, p_neg, p_pos, tol):
    """Vectorised bisection for ``phi = 0`` on segments ``p_neg -> p_pos``.

    Requires ``phi(p_neg) <= 0 <= phi(p_pos)``.  ``tol`` is an absolute length
    (scalar or per segment).  Returns the root estimates ``(m, 2)``.
    """
    lo = np.array(p_neg, dtype=float, copy=True)
    hi = np.array(p_pos, dtype=float, copy=True)
    if lo.shape[0] == 0:
        return lo
    tol = np.broadcast_to(np.asarray(tol, dtype=float), lo.shape[:1])
    vlo = phi.at(lo)
    vhi = phi.at(hi)
    hi[vlo == 0] = lo[vlo == 0]
    lo[vhi == 0] = hi[vhi == 0]
    for _ in range(200):
        width = np.hypot(*(hi - lo).T)
        active = width > tol
        if not active.any():
            break
        mid = 0.5 * (lo + hi)
        v = phi.at(mid)
        go_lo = active & (v < 0)
        go_hi = active & (v > 0)
        hit = active & (v == 0)
        lo[go_lo] = mid[go_lo]
        hi[go_hi] = mid[go_hi]
        lo[hit] = mid[hit]
        hi[hit] = mid[hit]
    return 0.5 * (lo + hi)


def boundary_defect(phi: LevelSet, cut, samples_per_segment=5):
    """Distance from sampled points of ``Gamma_K`` to the exact boundary,
    searched along the level-set gradient, divided by ``h_K``.

    Returns ``(ratio, flagged)`` over ``cut.cut_elements``.  Elements whose
    search does not bracket a root within ``2 h_K`` are flagged and get
    ``ratio = nan``.
    """
    elems = cut.cut_elements
    if elems.size == 0:
        return np.zeros(0), np.zeros(0, dtype=bool)
    a = cut.seg_a[elems]
    b = cut.seg_b[elems]
    hK = cut.mesh.diameters[elems]
    t = np.linspace(0.0, 1.0, samples_per_segment)
    pts = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    m = pts.shape[0] * pts.shape[1]
    x = pts.reshape(m, 2)
    h = np.repeat(hK, samples_per_segment)
    v0 = phi.at(x)
    grad = numerical_gradient(phi, x, 1e-7 * h)
    gn = np.hypot(*grad.T)
    ok = gn > 0
    d = np.zeros_like(grad)
    d[ok] = grad[ok] / gn[ok, None]
    # march towards the zero set
    d *= -np.sign(v0)[:, None]
    nsteps = 64
    dist = np.zeros(m)
    found = v0 == 0
    prev = x.copy()
    for k in range(1, nsteps + 1):
        s = 2.0 * h * k / nsteps
        cur = x + s[:, None] * d
        vc = phi.at(cur)
        newly = (~found) & ok & (np.sign(vc) != np.sign(v0))
        if newly.any():
            pn = np.where((v0[newly] < 0)[:, None], prev[newly], cur[newly])
            pp = np.where((v0[newly] < 0)[:, None], cur[newly], prev[newly])
            r = bisect_roots(phi, pn, pp, 1e-12 * h[newly])
            dist[newly] = np.hypot(*(r - x[newly]).T)
            found[newly] = True
        prev = cur
    ratio = (dist / h).reshape(-1, samples_per_segment)
    flagged_s = (~found).reshape(-1, samples_per_segment)
    flagged = flagged_s.any(axis=1)
    out = ratio.max(axis=1)
    out[flagged] = np.nan
    return out, flagged
