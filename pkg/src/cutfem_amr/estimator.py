"""Residual error indicators with the boundary correction term.

The boundary correction field lives on a sub-triangulation of the cut
elements that follows the exact boundary more closely than the chords of
``phi_h``.  Each cut element is split according to the signs of the exact
level set at its sorted vertices and at one edge midpoint:

====  =========================================  ======  =========
type  vertex signs / midpoint test                roots   triangles
====  =========================================  ======  =========
a     ``- + +``, ``phi(mid z1 z2) >= 0``          3       2
b     ``- + +``, ``phi(mid z1 z2) < 0``           4       4
c     ``- - +``, ``phi(mid z0 z1) < 0``           3       4
d     ``- - +``, ``phi(mid z0 z1) >= 0``          4       2
e     ``- 0 +``                                   1       1
====  =========================================  ======  =========
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .assembly import (
    BOUNDARY_ORDER, AREA_ORDER, BoundaryData, FeSpace, Solution, eval_field, _coeffs,
)
from .geometry import (
    barycentric, bisect_roots, fan_triangles, gauss_legendre, p1_gradients, quadrature_triangles, segment_rule,
)

TYPE_CODES = "abcde"
TRIANGLES_PER_TYPE = {"a": 2, "b": 4, "c": 4, "d": 2, "e": 1}
ROOT_TOL = 1e-12
BOUNDARY_TOL = 1e-10


class UndefinedEffectivityError(ZeroDivisionError):
    pass


@dataclass
class BcMesh:
    """Boundary correction sub-triangles.

    ``coords[j]`` is sub-triangle ``j`` (positively oriented), ``parent[j]``
    its cut element, ``on_boundary[j, i]`` tags vertices that lie on the
    exact boundary, and ``etilde[j, i]`` holds the correction field there.
    ``elements``/``types`` list the cut elements and their type letters.
    """

    coords: np.ndarray
    parent: np.ndarray
    on_boundary: np.ndarray
    etilde: np.ndarray
    elements: np.ndarray
    types: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def triangles(self):
        return self.coords

    @property
    def sub_types(self):
        lookup = dict(zip(self.elements.tolist(), self.types.tolist()))
        return np.array([lookup[p] for p in self.parent.tolist()])

    @property
    def areas(self):
        d1 = self.coords[:, 1] - self.coords[:, 0]
        d2 = self.coords[:, 2] - self.coords[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def grad_etilde(self):
        if len(self.coords) == 0:
            return np.zeros((0, 2))
        g, _ = p1_gradients(self.coords)
        return np.einsum("nid,ni->nd", g, self.etilde)

    def eta_bc_sq(self, nelements):
        """``||grad etilde||^2`` per parent element (length ``nelements``)."""
        out = np.zeros(nelements)
        if len(self.coords):
            ge = self.grad_etilde()
            np.add.at(out, self.parent, self.areas * np.einsum("nd,nd->n", ge, ge))
        return out


def _g_values(g, pts):
    if isinstance(g, BoundaryData):
        return g.g_at(pts)
    if np.isscalar(g):
        return np.full(pts.shape[:-1], float(g))
    return np.asarray(g(pts[..., 0], pts[..., 1]), dtype=float) + np.zeros(pts.shape[:-1])


def classify_cells(phi, corners, vals):
    """Sort vertices and pick the cell type.

    ``corners`` is ``(n, 3, 2)``, ``vals`` the nodal level-set values used
    for sorting (snapped).  Returns ``(order, types, downgraded)``.
    """
    order = np.argsort(vals, axis=1, kind="stable")
    sv = np.take_along_axis(vals, order, axis=1)
    z = np.take_along_axis(corners, order[:, :, None], axis=1)
    types = np.full(len(vals), "e", dtype="<U1")
    ok = (sv[:, 0] < 0) & (sv[:, 2] > 0)
    pos1 = ok & (sv[:, 1] > 0)
    neg1 = ok & (sv[:, 1] < 0)
    if pos1.any():
        m12 = 0.5 * (z[pos1, 1] + z[pos1, 2])
        types[pos1] = np.where(phi.at(m12) >= 0, "a", "b")
    if neg1.any():
        m01 = 0.5 * (z[neg1, 0] + z[neg1, 1])
        types[neg1] = np.where(phi.at(m01) < 0, "c", "d")
    return order, types, ~ok


def build_bc_mesh(cut, phi, u_h, g) -> BcMesh:
    """Sub-triangulate every cut element and set the correction field
    ``etilde = g - u_h`` on exact-boundary vertices, zero elsewhere."""
    mesh = cut.mesh
    elems = cut.cut_elements
    if elems.size == 0:
        return BcMesh(np.zeros((0, 3, 2)), np.zeros(0, dtype=np.int64), np.zeros((0, 3), dtype=bool),
                      np.zeros((0, 3)), elems, np.zeros(0, dtype="<U1"),
                      {"downgraded": 0, "flagged": 0})
    corners = mesh.coords[elems]
    vals = cut.phih[mesh.triangles[elems]]
    order, types, downgraded = classify_cells(phi, corners, vals)
    z = np.take_along_axis(corners, order[:, :, None], axis=1)
    hK = mesh.diameters[elems]
    z0, z1, z2 = z[:, 0], z[:, 1], z[:, 2]
    m01 = 0.5 * (z0 + z1)
    m12 = 0.5 * (z1 + z2)

    # (neg, pos) brackets per type; root names follow z3, z4, ...
    brackets = {
        "a": [(z0, z1), (z0, z2), (z0, m12)],
        "b": [(z0, z1), (z0, z2), (m12, z1), (m12, z2)],
        "c": [(z1, z2), (z0, z2), (m01, z2)],
        "d": [(z1, z2), (z0, z2), (z0, m01), (z1, m01)],
        "e": [(z0, z2)],
    }
    roots = {}
    flagged = np.zeros(len(elems), dtype=bool)
    for tcode, segs in brackets.items():
        sel = types == tcode
        if tcode == "e":
            sel = sel & ~downgraded
        if not sel.any():
            continue
        rs = []
        for neg, pos in segs:
            r = bisect_roots(phi, neg[sel], pos[sel], ROOT_TOL * hK[sel])
            rs.append(r)
            bad = np.abs(phi.at(r)) > BOUNDARY_TOL * hK[sel]
            flagged[np.flatnonzero(sel)[bad]] = True
        roots[tcode] = (np.flatnonzero(sel), rs)

    tris, parent, tags, tcodes = [], [], [], []

    def emit(idx, pts, bnd):
        tris.append(np.stack(pts, axis=1))
        parent.append(elems[idx])
        tags.append(np.tile(np.array(bnd, dtype=bool), (len(idx), 1)))

    for tcode, (idx, r) in roots.items():
        Z0, Z1, Z2 = z0[idx], z1[idx], z2[idx]
        if tcode == "a":
            z3, z4, z5 = r
            emit(idx, [Z0, z3, z5], [False, True, True])
            emit(idx, [Z0, z5, z4], [False, True, True])
        elif tcode == "b":
            z3, z4, z5, z6 = r
            M = m12[idx]
            emit(idx, [Z0, z3, z5], [False, True, True])
            emit(idx, [Z0, z5, M], [False, True, False])
            emit(idx, [Z0, M, z6], [False, False, True])
            emit(idx, [Z0, z6, z4], [False, True, True])
        elif tcode == "c":
            z3, z4, z5 = r
            M = m01[idx]
            emit(idx, [M, Z1, z3], [False, False, True])
            emit(idx, [M, z3, z5], [False, True, True])
            emit(idx, [M, z5, z4], [False, True, True])
            emit(idx, [M, z4, Z0], [False, True, False])
        elif tcode == "d":
            z3, z4, z5, z6 = r
            emit(idx, [Z0, z5, z4], [False, True, True])
            emit(idx, [Z1, z3, z6], [False, True, True])
        else:
            (z3,) = r
            emit(idx, [Z0, Z1, z3], [False, True, True])
    dg = np.flatnonzero(downgraded)
    if dg.size:
        # phi(z2) = 0 too: the whole element is the correction cell
        emit(dg, [z0[dg], z1[dg], z2[dg]], [False, True, True])

    coords = np.concatenate(tris, axis=0)
    parent = np.concatenate(parent)
    on_bnd = np.concatenate(tags, axis=0)
    # positive orientation
    d1 = coords[:, 1] - coords[:, 0]
    d2 = coords[:, 2] - coords[:, 0]
    neg = (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]) < 0
    coords[neg] = coords[neg][:, [0, 2, 1]]
    on_bnd[neg] = on_bnd[neg][:, [0, 2, 1]]
    # deterministic order: by parent element, then emission order
    srt = np.argsort(parent, kind="stable")
    coords, parent, on_bnd = coords[srt], parent[srt], on_bnd[srt]

    uh = u_h.nodal if isinstance(u_h, Solution) else np.asarray(u_h, dtype=float)
    lam = barycentric(mesh.coords[parent], coords)
    uz = np.einsum("nqi,ni->nq", lam, uh[mesh.triangles[parent]])
    gz = _g_values(g, coords)
    et = np.where(on_bnd, gz - uz, 0.0)
    return BcMesh(coords=coords, parent=parent, on_boundary=on_bnd, etilde=et,
                  elements=elems, types=types,
                  diagnostics={"downgraded": int(downgraded.sum()), "flagged": int(flagged.sum())})


# ---------------------------------------------------------------------------
# indicators
# ---------------------------------------------------------------------------

@dataclass
class IndicatorField:
    """Squared indicator components per mesh element (zero off the active
    mesh) and the global estimator."""

    residual_sq: np.ndarray
    jump_sq: np.ndarray
    nitsche_sq: np.ndarray
    bc_sq: np.ndarray
    with_bc: bool = True

    @property
    def eta_sq(self):
        out = self.residual_sq + self.jump_sq + self.nitsche_sq
        if self.with_bc:
            out = out + self.bc_sq
        return out

    @property
    def eta_K(self):
        return np.sqrt(self.eta_sq)

    @property
    def eta(self):
        return float(np.sqrt(np.sum(self.eta_sq)))

    def component(self, name):
        return float(np.sqrt(np.sum(getattr(self, f"{name}_sq"))))


def compute_indicators(space: FeSpace, u_h, f, g_h: BoundaryData, bc: BcMesh | None,
                       with_bc=True) -> IndicatorField:
    cut = space.cut
    mesh = cut.mesh
    nt = mesh.ntriangles
    c = space.to_vertices(_coeffs(u_h))
    act = cut.active
    hK = mesh.diameters

    residual = np.zeros(nt)
    tris, par = fan_triangles(cut.poly[act], cut.npoly[act])
    if len(tris):
        pts, w = quadrature_triangles(tris, AREA_ORDER)
        el = act[par]
        fv = eval_field(f, mesh, el, pts)
        np.add.at(residual, el, (w * fv * fv).sum(axis=1))
    residual *= hK ** 2

    jump = np.zeros(nt)
    fi = cut.interior_facets
    if fi.size:
        k1 = mesh.facet_owner[fi]
        k2 = mesh.facet_neighbor[fi]
        g1 = np.einsum("nid,ni->nd", mesh.gradients[k1], c[mesh.triangles[k1]])
        g2 = np.einsum("nid,ni->nd", mesh.gradients[k2], c[mesh.triangles[k2]])
        J = np.einsum("nd,nd->n", g1 - g2, mesh.facet_normals[fi])
        hF = mesh.facet_lengths[fi]
        val = 0.5 * hF * hF * J * J
        np.add.at(jump, k1, val)
        np.add.at(jump, k2, val)

    nitsche = np.zeros(nt)
    ce = np.flatnonzero(cut.has_gamma)
    if ce.size:
        pts, w = segment_rule(cut.seg_a[ce], cut.seg_b[ce], BOUNDARY_ORDER)
        t = gauss_legendre(BOUNDARY_ORDER)[0]
        lam = barycentric(mesh.coords[ce], pts)
        uq = np.einsum("nqi,ni->nq", lam, c[mesh.triangles[ce]])
        gq = g_h.on_segments(cut.seg_a[ce], cut.seg_b[ce], t, ce)
        nitsche[ce] = (w * (gq - uq) ** 2).sum(axis=1) / hK[ce]

    bc_sq = bc.eta_bc_sq(nt) if bc is not None else np.zeros(nt)
    return IndicatorField(residual, jump, nitsche, bc_sq, with_bc=with_bc)


def oscillation(space: FeSpace, f, bc: BcMesh | None = None, per_element=False, patch_factor=8.0):
    """Data oscillation with vertex-patch mean values.

    For every active element the patch vertex ``z`` with the largest
    ``|omega_z cap Omega_h|`` is used.  Returns ``osc`` (and, with
    ``per_element``, the per-element terms and the count of elements whose
    patch diameter exceeds ``patch_factor * h_K``).
    """
    cut = space.cut
    mesh = cut.mesh
    nt = mesh.ntriangles
    t = mesh.triangles
    act = cut.active
    S0 = np.where(cut.active_mask, cut.area_in, 0.0)
    S1 = np.zeros(nt)
    tris, par = fan_triangles(cut.poly[act], cut.npoly[act])
    if len(tris):
        pts, w = quadrature_triangles(tris, AREA_ORDER)
        el = act[par]
        fv = eval_field(f, mesh, el, pts)
        np.add.at(S1, el, (w * fv).sum(axis=1))
    nv = mesh.nvertices
    V0 = np.bincount(t.ravel(), weights=np.repeat(S0, 3), minlength=nv)
    V1 = np.bincount(t.ravel(), weights=np.repeat(S1, 3), minlength=nv)
    fmean = np.where(V0 > 0, V1 / np.where(V0 > 0, V0, 1.0), 0.0)
    # int (f - f_z)^2 over omega_z cap Omega_h, accumulated directly to
    # avoid cancellation in the expanded form
    V2 = np.zeros(nv)
    if len(tris):
        dev = (w[:, :, None] * (fv[:, :, None] - fmean[t[el]][:, None, :]) ** 2).sum(axis=1)
        np.add.at(V2, t[el].ravel(), dev.ravel())
    hmax = np.zeros(nv)
    np.maximum.at(hmax, t[act].ravel(), np.repeat(mesh.diameters[act], 3))

    zloc = V0[t[act]].argmax(axis=1)
    z = t[act, zloc]
    fz = fmean[z]
    hK = mesh.diameters[act]
    term1 = V2[z]
    wide = 2 * hmax[z] > patch_factor * hK

    term2 = np.zeros(len(act))
    omitted = bc is None
    if bc is not None and len(bc.coords):
        pos_in_act = np.full(nt, -1, dtype=np.int64)
        pos_in_act[act] = np.arange(len(act))
        # part of each correction cell with phi_h >= 0
        lam = barycentric(mesh.coords[bc.parent], bc.coords)
        ph = np.einsum("nqi,ni->nq", lam, cut.phih[t[bc.parent]])
        gid = np.tile(np.arange(3), (len(bc.coords), 1))
        _, poly, npoly, _, _ = _kernels.clip_triangles(bc.coords, -ph, gid)
        ot, opar = fan_triangles(poly, npoly)
        if len(ot):
            pts, w = quadrature_triangles(ot, AREA_ORDER)
            el = bc.parent[opar]
            fv = eval_field(f, mesh, el, pts)
            k = pos_in_act[el]
            np.add.at(term2, k, (w * (fv - fz[k][:, None]) ** 2).sum(axis=1))
    per = hK * np.sqrt(term1 + term2)
    osc = float(per.sum())
    if per_element:
        out = np.zeros(nt)
        out[act] = per
        return osc, out, {"wide_patches": int(wide.sum()), "outside_part_omitted": omitted}
    return osc


def effectivity(indicators, true_error, atol=1e-12):
    eta = indicators.eta if isinstance(indicators, IndicatorField) else float(indicators)
    if not true_error > atol:
        raise UndefinedEffectivityError(f"true error {true_error!r} is too small for an effectivity index")
    return eta / true_error
