"""Background triangulation, newest-vertex bisection and active-mesh
extraction.

Triangles are stored as ``[peak, a, b]`` with positive orientation; the
refinement edge is ``(a, b)``, i.e. local facet 1.  Local facet ``k`` is the
edge ``(v_k, v_{k+1})``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import _kernels
from .geometry import (
    Classification, ClipResult, DegenerateCutError, GeometryError, NodalField,
    _facet_portions, p1_gradients, snap_tolerance,
)

REFINEMENT_FACET = 1


class MeshError(ValueError):
    pass


class DomainNotFoundError(MeshError):
    """No element of the background mesh meets the discrete domain."""


class TriMesh:
    """Immutable conforming triangulation with facet adjacency."""

    def __init__(self, vertices, triangles, parent=None, generation=0):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        if parent is None:
            parent = np.full(len(self.triangles), -1, dtype=np.int64)
        self.parent = np.asarray(parent, dtype=np.int64)
        self.generation = int(generation)
        self.vertices.setflags(write=False)
        self.triangles.setflags(write=False)
        if np.any(self.signed_areas <= 0):
            raise MeshError("triangles must be positively oriented and non-degenerate")

    @property
    def nvertices(self):
        return len(self.vertices)

    @property
    def ntriangles(self):
        return len(self.triangles)

    @property
    def nfacets(self):
        return len(self.facets)

    @cached_property
    def coords(self):
        """Vertex coordinates per triangle, ``(nt, 3, 2)``."""
        return self.vertices[self.triangles]

    @cached_property
    def signed_areas(self):
        xy = self.vertices[self.triangles]
        d1 = xy[:, 1] - xy[:, 0]
        d2 = xy[:, 2] - xy[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def areas(self):
        return self.signed_areas

    @cached_property
    def gradients(self):
        g, _ = p1_gradients(self.coords)
        return g

    @cached_property
    def edge_lengths(self):
        """``(nt, 3)`` lengths of local facets."""
        xy = self.coords
        return np.stack([np.hypot(*(xy[:, (k + 1) % 3] - xy[:, k]).T) for k in range(3)], axis=1)

    @cached_property
    def diameters(self):
        return self.edge_lengths.max(axis=1)

    @cached_property
    def _facet_data(self):
        t = self.triangles
        nt = len(t)
        e = np.stack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=1).reshape(-1, 2)
        lo = e.min(axis=1)
        hi = e.max(axis=1)
        key = lo * self.nvertices + hi
        ukey, first, inv, counts = np.unique(key, return_index=True, return_inverse=True,
                                             return_counts=True)
        if np.any(counts > 2):
            raise MeshError("non-manifold facet shared by more than two triangles")
        facets = np.stack([lo[first], hi[first]], axis=1)
        tri_of = np.repeat(np.arange(nt), 3)
        order = np.argsort(inv, kind="stable")
        owner = np.full(len(ukey), -1, dtype=np.int64)
        neighbor = np.full(len(ukey), -1, dtype=np.int64)
        sinv = inv[order]
        stri = tri_of[order]
        start = np.r_[0, np.cumsum(counts)[:-1]]
        owner[:] = stri[start]
        two = counts == 2
        neighbor[two] = stri[start[two] + 1]
        return facets, owner, neighbor, inv.reshape(nt, 3)

    @property
    def facets(self):
        return self._facet_data[0]

    @property
    def facet_owner(self):
        return self._facet_data[1]

    @property
    def facet_neighbor(self):
        return self._facet_data[2]

    @property
    def tri_facets(self):
        return self._facet_data[3]

    @cached_property
    def facet_lengths(self):
        f = self.facets
        return np.hypot(*(self.vertices[f[:, 1]] - self.vertices[f[:, 0]]).T)

    @cached_property
    def facet_normals(self):
        """Unit normals pointing out of the owner triangle."""
        f = self.facets
        d = self.vertices[f[:, 1]] - self.vertices[f[:, 0]]
        n = np.stack([d[:, 1], -d[:, 0]], axis=1) / self.facet_lengths[:, None]
        mid = 0.5 * (self.vertices[f[:, 0]] + self.vertices[f[:, 1]])
        cen = self.coords[self.facet_owner].mean(axis=1)
        flip = np.einsum("ij,ij->i", n, mid - cen) < 0
        n[flip] *= -1
        return n

    @property
    def boundary_facets(self):
        return np.flatnonzero(self.facet_neighbor < 0)

    @cached_property
    def vertex_diameter(self):
        """Largest diameter among the triangles touching each vertex."""
        h = np.zeros(self.nvertices)
        np.maximum.at(h, self.triangles.ravel(), np.repeat(self.diameters, 3))
        return h

    def min_angle(self):
        xy = self.coords
        out = np.full(self.ntriangles, np.pi)
        for i in range(3):
            u = xy[:, (i + 1) % 3] - xy[:, i]
            v = xy[:, (i + 2) % 3] - xy[:, i]
            c = np.einsum("ij,ij->i", u, v) / (np.hypot(*u.T) * np.hypot(*v.T))
            out = np.minimum(out, np.arccos(np.clip(c, -1.0, 1.0)))
        return float(out.min())

    def audit(self):
        """Raise :class:`MeshError` unless the mesh is conforming."""
        f = self.facets
        owner, nb = self.facet_owner, self.facet_neighbor
        # a hanging node sits in the interior of some facet; detect via
        # boundary facets that are not on the convex hull of the mesh box
        bnd = nb < 0
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        p = self.vertices[f[bnd]]
        on_box = (
            (np.isclose(p[:, :, 0], lo[0]).all(axis=1)) | (np.isclose(p[:, :, 0], hi[0]).all(axis=1))
            | (np.isclose(p[:, :, 1], lo[1]).all(axis=1)) | (np.isclose(p[:, :, 1], hi[1]).all(axis=1))
        )
        if not on_box.all():
            raise MeshError("boundary facet inside the mesh box: mesh is not conforming")
        if np.any(owner < 0) or np.any(nb[~bnd] == owner[~bnd]):
            raise MeshError("facet with invalid owners")
        if np.any(self.signed_areas <= 0):
            raise MeshError("non-positive triangle area")

    def refine(self, marked):
        return refine(self, marked)


def build_background_mesh(bbox, n) -> TriMesh:
    """``n x n`` squares over ``bbox = (xmin, xmax, ymin, ymax)``, each split
    along the same diagonal, which is also the refinement edge."""
    n = int(n)
    if n < 1:
        raise MeshError("n must be >= 1")
    x0, x1, y0, y1 = map(float, bbox)
    if not (x1 > x0 and y1 > y0):
        raise MeshError("degenerate bounding box")
    xs = np.linspace(x0, x1, n + 1)
    ys = np.linspace(y0, y1, n + 1)
    X, Y = np.meshgrid(xs, ys)
    verts = np.stack([X.ravel(), Y.ravel()], axis=1)
    i, j = np.meshgrid(np.arange(n), np.arange(n))
    i, j = i.ravel(), j.ravel()
    v00 = i + (n + 1) * j
    v10 = v00 + 1
    v01 = v00 + (n + 1)
    v11 = v01 + 1
    lower = np.stack([v10, v11, v00], axis=1)
    upper = np.stack([v01, v00, v11], axis=1)
    tris = np.stack([lower, upper], axis=1).reshape(-1, 3)
    return TriMesh(verts, tris)


def refine(mesh: TriMesh, marked) -> TriMesh:
    """Newest-vertex bisection of ``marked`` triangles plus closure."""
    marked = np.unique(np.asarray(marked, dtype=np.int64))
    if marked.size == 0:
        return mesh
    if marked.min() < 0 or marked.max() >= mesh.ntriangles:
        raise MeshError("marked triangle index out of range")
    tf = mesh.tri_facets
    cut = np.zeros(mesh.nfacets, dtype=bool)
    cut[tf[marked, REFINEMENT_FACET]] = True
    while True:
        need = (cut[tf[:, 0]] | cut[tf[:, 2]]) & ~cut[tf[:, REFINEMENT_FACET]]
        if not need.any():
            break
        cut[tf[need, REFINEMENT_FACET]] = True

    cut_ids = np.flatnonzero(cut)
    mid = np.full(mesh.nfacets, -1, dtype=np.int64)
    mid[cut_ids] = mesh.nvertices + np.arange(cut_ids.size)
    f = mesh.facets[cut_ids]
    new_verts = 0.5 * (mesh.vertices[f[:, 0]] + mesh.vertices[f[:, 1]])
    verts = np.vstack([mesh.vertices, new_verts])

    t = mesh.triangles
    nt = len(t)
    p, a, b = t[:, 0], t[:, 1], t[:, 2]
    kids = np.full((nt, 4, 3), -1, dtype=np.int64)
    kids[:, 0] = t
    bis = cut[tf[:, REFINEMENT_FACET]]
    m = mid[tf[:, REFINEMENT_FACET]]
    c1 = np.stack([m, p, a], axis=1)
    c2 = np.stack([m, b, p], axis=1)
    kids[bis, 0] = c1[bis]
    kids[bis, 2] = c2[bis]
    # second level: the children's refinement edges are the parent's other facets
    b1 = bis & cut[tf[:, 0]]
    m1 = mid[tf[:, 0]]
    kids[b1, 0] = np.stack([m1, m, p], axis=1)[b1]
    kids[b1, 1] = np.stack([m1, a, m], axis=1)[b1]
    b2 = bis & cut[tf[:, 2]]
    m2 = mid[tf[:, 2]]
    kids[b2, 2] = np.stack([m2, m, b], axis=1)[b2]
    kids[b2, 3] = np.stack([m2, p, m], axis=1)[b2]
    valid = kids[:, :, 0] >= 0
    new_tris = kids[valid]
    parent = np.repeat(np.arange(nt), valid.sum(axis=1))
    return TriMesh(verts, new_tris, parent=parent, generation=mesh.generation + 1)


# ---------------------------------------------------------------------------
# active mesh
# ---------------------------------------------------------------------------

@dataclass
class CutTopology:
    """Active mesh, cut elements, boundary segments and ghost facets.

    Per-element arrays have length ``mesh.ntriangles``; entries of inactive
    elements are padding.
    """

    mesh: TriMesh
    phih: np.ndarray            # snapped nodal values
    classification: np.ndarray  # Classification codes after promotion
    active_mask: np.ndarray
    cut_mask: np.ndarray
    poly: np.ndarray            # (nt, 4, 2) inside polygon, ccw
    npoly: np.ndarray
    area_in: np.ndarray
    seg_a: np.ndarray
    seg_b: np.ndarray
    normal: np.ndarray          # unit outward normal of Gamma_K
    gamma_len: np.ndarray
    has_gamma: np.ndarray       # cut and Gamma_K of positive length
    touch_mask: np.ndarray      # element closure meets the discrete boundary
    interior_facets: np.ndarray
    ghost_facets: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def active(self):
        return np.flatnonzero(self.active_mask)

    @property
    def cut_elements(self):
        return np.flatnonzero(self.cut_mask)

    @property
    def inside_elements(self):
        return np.flatnonzero(self.active_mask & ~self.cut_mask)

    def clip(self, k) -> ClipResult:
        k = int(k)
        K = self.mesh.coords[k]
        vals = self.phih[self.mesh.triangles[k]]
        seg = None
        if self.cut_mask[k]:
            seg = (self.seg_a[k].copy(), self.seg_b[k].copy(), self.normal[k].copy())
        return ClipResult(
            classification=Classification(int(self.classification[k])),
            inside_polygon=self.poly[k, : self.npoly[k]].copy() if self.active_mask[k]
            else np.zeros((0, 2)),
            boundary_segment=seg,
            facet_portions=_facet_portions(K, vals),
        )


def snapped_values(mesh, phih):
    vals = np.array(phih.values if isinstance(phih, NodalField) else phih, dtype=float)
    vals[np.abs(vals) < snap_tolerance(mesh.vertex_diameter)] = 0.0
    return vals


def extract_active(mesh: TriMesh, phih) -> CutTopology:
    if isinstance(phih, NodalField) and phih.mesh is not mesh:
        raise MeshError("nodal field was built on a different mesh")
    vals = snapped_values(mesh, phih)
    t = mesh.triangles
    cls, poly, npoly, zpts, nz = _kernels.clip_triangles(mesh.coords, vals[t], t)
    bad = np.flatnonzero(cls == _kernels.DEGENERATE)
    if bad.size:
        raise DegenerateCutError(f"element {int(bad[0])} has all nodal level-set values zero")
    cls = cls.astype(np.int64)

    # an inside element whose facet lies on {phi_h = 0} with nothing active
    # beyond it carries that facet as its boundary segment
    zero = vals[t] == 0
    twozero = (cls == _kernels.INSIDE) & (zero.sum(axis=1) == 2)
    promoted = np.zeros(len(t), dtype=bool)
    if twozero.any():
        idx = np.flatnonzero(twozero)
        zt = zero[idx]
        # local facet k = (v_k, v_{k+1}) with both ends zero
        k = np.where(zt[:, 0] & zt[:, 1], 0, np.where(zt[:, 1] & zt[:, 2], 1, 2))
        fac = mesh.tri_facets[idx, k]
        other = np.where(mesh.facet_owner[fac] == idx, mesh.facet_neighbor[fac], mesh.facet_owner[fac])
        ok = (other < 0) | (cls[np.maximum(other, 0)] == _kernels.OUTSIDE)
        promoted[idx[ok]] = True
    cls[promoted] = _kernels.CUT

    cut_mask = cls == _kernels.CUT
    active_mask = (cls == _kernels.INSIDE) | cut_mask
    if not active_mask.any():
        raise DomainNotFoundError("no background element meets the discrete domain")

    nt = len(t)
    seg_a = np.full((nt, 2), np.nan)
    seg_b = np.full((nt, 2), np.nan)
    seg_a[cut_mask] = zpts[cut_mask, 0]
    seg_b[cut_mask] = zpts[cut_mask, 1]
    grad = np.einsum("ni,nid->nd", vals[t], mesh.gradients)
    gn = np.hypot(*grad.T)
    normal = np.full((nt, 2), np.nan)
    normal[cut_mask] = grad[cut_mask] / gn[cut_mask, None]
    gamma_len = np.zeros(nt)
    gamma_len[cut_mask] = np.hypot(*(seg_b[cut_mask] - seg_a[cut_mask]).T)
    has_gamma = cut_mask & (gamma_len > 1e-14 * mesh.diameters)

    x, y = poly[:, :, 0], poly[:, :, 1]
    slot = np.arange(4)[None, :]
    valid = slot < npoly[:, None]
    nxt = np.where(slot + 1 < npoly[:, None], slot + 1, 0)
    xn = np.take_along_axis(x, nxt, axis=1)
    yn = np.take_along_axis(y, nxt, axis=1)
    area_in = 0.5 * np.where(valid, x * yn - xn * y, 0.0).sum(axis=1)
    area_in[~active_mask] = 0.0

    # zero vertices on the discrete boundary: those of cut elements and
    # those shared with an element outside the active mesh
    zero_bnd = np.zeros(mesh.nvertices, dtype=bool)
    cz = zero & (cut_mask | ~active_mask)[:, None]
    zero_bnd[t[cz]] = True
    touch = cut_mask | (active_mask & zero_bnd[t].any(axis=1))

    owner, nb = mesh.facet_owner, mesh.facet_neighbor
    both = (nb >= 0)
    both[both] = active_mask[owner[both]] & active_mask[nb[both]]
    interior = np.flatnonzero(both)
    ghost = interior[touch[owner[interior]] | touch[nb[interior]]]

    # a cut element should have an uncut active element nearby
    has_inside = np.zeros(mesh.nvertices, dtype=bool)
    has_inside[t[active_mask & ~cut_mask].ravel()] = True
    lonely = cut_mask & ~has_inside[t].any(axis=1)

    diagnostics = {
        "promoted_facets": int(promoted.sum()),
        "degenerate_segments": int((cut_mask & ~has_gamma).sum()),
        "isolated_cut_elements": int(lonely.sum()),
    }
    return CutTopology(
        mesh=mesh, phih=vals, classification=cls, active_mask=active_mask, cut_mask=cut_mask,
        poly=poly, npoly=npoly, area_in=area_in, seg_a=seg_a, seg_b=seg_b, normal=normal,
        gamma_len=gamma_len, has_gamma=has_gamma, touch_mask=touch,
        interior_facets=interior, ghost_facets=ghost, diagnostics=diagnostics,
    )


def vertex_patches(mesh: TriMesh):
    """CSR-style vertex -> incident triangles map ``(ptr, tris)``."""
    t = mesh.triangles.ravel()
    order = np.argsort(t, kind="stable")
    tris = order // 3
    counts = np.bincount(t, minlength=mesh.nvertices)
    ptr = np.r_[0, np.cumsum(counts)]
    return ptr, tris
