"""CutFEM system for the Poisson problem: P1 on the active mesh, Nitsche
boundary terms on the discrete boundary segments, ghost penalty on facets
next to the boundary."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigvalsh_tridiagonal

from . import _kernels
from .geometry import barycentric, fan_triangles, quadrature_triangles, segment_rule, gauss_legendre
from .mesh import CutTopology

AREA_ORDER = 2
BOUNDARY_ORDER = 3
ERROR_ORDER = 5


class SolverError(RuntimeError):
    """CG did not reach the requested tolerance."""

    def __init__(self, msg, residual, iterations, cond_est=np.nan):
        super().__init__(msg)
        self.residual = residual
        self.iterations = iterations
        self.cond_est = cond_est


class UnsupportedDiagnosticError(ValueError):
    pass


# ---------------------------------------------------------------------------
# data fields
# ---------------------------------------------------------------------------

class P1Field:
    """Nodal values on mesh vertices, evaluated through the P1 interpolant."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=float)

    def on_elements(self, mesh, elems, pts):
        lam = barycentric(mesh.coords[elems], pts)
        return np.einsum("nqi,ni->nq", lam, self.values[mesh.triangles[elems]])


def eval_field(f, mesh, elems, pts):
    """Evaluate a source field at ``pts`` (``(m, q, 2)``) lying in ``elems``."""
    if isinstance(f, P1Field):
        return f.on_elements(mesh, elems, pts)
    if np.isscalar(f):
        return np.full(pts.shape[:-1], float(f))
    return np.asarray(f(pts[..., 0], pts[..., 1]), dtype=float) + np.zeros(pts.shape[:-1])


@dataclass
class BoundaryData:
    """Dirichlet datum ``g`` and how ``g_h`` is built on each segment.

    ``mode="linear"`` interpolates ``g`` linearly between the endpoints of
    each boundary segment (the edge roots of ``phi_h``).  Attaching a
    ``mesh`` switches to the nodal interpolant of ``g`` on that mesh instead.
    ``mode="constant"`` uses ``g`` at the segment midpoint.
    """

    g: object
    mode: str = "linear"
    mesh: object = None

    def __post_init__(self):
        if self.mode not in ("linear", "constant"):
            raise ValueError(f"unknown g_h mode {self.mode!r}")
        self._nodal = None
        if self.mesh is not None and self.mode == "linear":
            self._nodal = P1Field(self.g_at(self.mesh.vertices))

    def g_at(self, pts):
        if np.isscalar(self.g):
            return np.full(pts.shape[:-1], float(self.g))
        return np.asarray(self.g(pts[..., 0], pts[..., 1]), dtype=float) + np.zeros(pts.shape[:-1])

    def on_segments(self, a, b, t, elems=None):
        """``g_h`` at parameters ``t`` (``(q,)``) along segments ``a -> b``
        lying in ``elems``."""
        if self.mode == "constant":
            gm = self.g_at(0.5 * (a + b))
            return np.repeat(gm[:, None], len(t), axis=1)
        if self._nodal is not None:
            if elems is None:
                raise ValueError("nodal g_h needs the owning elements")
            ends = self._nodal.on_elements(self.mesh, elems, np.stack([a, b], axis=1))
            ga, gb = ends[:, 0], ends[:, 1]
        else:
            ga = self.g_at(a)
            gb = self.g_at(b)
        return (1.0 - t)[None, :] * ga[:, None] + t[None, :] * gb[:, None]


# ---------------------------------------------------------------------------
# space and system
# ---------------------------------------------------------------------------

@dataclass
class FeSpace:
    cut: CutTopology
    dof_of_vertex: np.ndarray
    vertex_of_dof: np.ndarray

    @property
    def mesh(self):
        return self.cut.mesh

    @property
    def ndofs(self):
        return len(self.vertex_of_dof)

    @classmethod
    def from_cut(cls, cut: CutTopology):
        verts = np.unique(cut.mesh.triangles[cut.active].ravel())
        dof = np.full(cut.mesh.nvertices, -1, dtype=np.int64)
        dof[verts] = np.arange(verts.size)
        return cls(cut, dof, verts)

    def element_dofs(self, elems):
        return self.dof_of_vertex[self.mesh.triangles[elems]]

    def to_vertices(self, coeffs):
        """Expand a dof vector to all vertices (zero off the active mesh)."""
        out = np.zeros(self.mesh.nvertices)
        out[self.vertex_of_dof] = coeffs
        return out

    def interpolate(self, fn):
        v = self.mesh.vertices[self.vertex_of_dof]
        return np.asarray(fn(v[:, 0], v[:, 1]), dtype=float) + np.zeros(len(v))


@dataclass
class LinearSystem:
    A: sp.csr_matrix
    b: np.ndarray
    beta: float
    gamma: float
    space: FeSpace
    diagnostics: dict = field(default_factory=dict)


@dataclass
class Solution:
    coeffs: np.ndarray
    iterations: int
    rel_residual: float
    cond_est: float
    ritz_min: float
    ritz_max: float
    space: FeSpace

    @property
    def nodal(self):
        return self.space.to_vertices(self.coeffs)


def _sym(ke):
    return 0.5 * (ke + np.swapaxes(ke, -1, -2))


def _accumulate(rows, cols, vals, n):
    """Sum COO triplets in a fixed order; (i, j) and (j, i) receive their
    contributions in the same sequence, so symmetric input stays bit-symmetric."""
    key = rows * n + cols
    order = np.argsort(key, kind="stable")
    key = key[order]
    vals = vals[order]
    start = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
    data = np.add.reduceat(vals, start) if vals.size else vals
    ukey = key[start]
    r = ukey // n
    c = ukey % n
    indptr = np.r_[0, np.cumsum(np.bincount(r, minlength=n))]
    return sp.csr_matrix((data, c, indptr), shape=(n, n))


def nitsche_element_terms(cut, elems, beta):
    """Boundary quadrature data and the Nitsche element matrices on ``elems``."""
    mesh = cut.mesh
    t = gauss_legendre(BOUNDARY_ORDER)[0]
    a, b = cut.seg_a[elems], cut.seg_b[elems]
    pts, w = segment_rule(a, b, BOUNDARY_ORDER)
    lam = barycentric(mesh.coords[elems], pts)
    G = mesh.gradients[elems]
    n = cut.normal[elems]
    dn = np.einsum("nid,nd->ni", G, n)
    mvec = np.einsum("nq,nqi->ni", w, lam)
    M = np.einsum("nq,nqi,nqj->nij", w, lam, lam)
    hK = mesh.diameters[elems]
    ke = -(dn[:, None, :] * mvec[:, :, None] + dn[:, :, None] * mvec[:, None, :])
    ke += (beta / hK)[:, None, None] * M
    return ke, pts, w, lam, dn, t


def ghost_facet_terms(cut, facets, gamma):
    """Slot coefficients of the normal-derivative jump and the 6x6 facet
    matrices ``gamma h_F |F| J J^T``."""
    mesh = cut.mesh
    k1 = mesh.facet_owner[facets]
    k2 = mesh.facet_neighbor[facets]
    nF = mesh.facet_normals[facets]
    hF = mesh.facet_lengths[facets]
    J = np.concatenate([
        np.einsum("nid,nd->ni", mesh.gradients[k1], nF),
        -np.einsum("nid,nd->ni", mesh.gradients[k2], nF),
    ], axis=1)
    verts = np.concatenate([mesh.triangles[k1], mesh.triangles[k2]], axis=1)
    ke = (gamma * hF * hF)[:, None, None] * J[:, :, None] * J[:, None, :]
    return ke, verts, J


def assemble(space: FeSpace, cut: CutTopology, f, g_h: BoundaryData, beta=10.0, gamma=0.1):
    if not beta > 0:
        raise ValueError("beta must be positive")
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    mesh = cut.mesh
    n = space.ndofs
    act = cut.active
    G = mesh.gradients[act]
    ke = cut.area_in[act][:, None, None] * np.einsum("nid,njd->nij", G, G)
    be = np.zeros((len(act), 3))

    # volume source term on K cap Omega_h
    tris, parent = fan_triangles(cut.poly[act], cut.npoly[act])
    if len(tris):
        pts, w = quadrature_triangles(tris, AREA_ORDER)
        el = act[parent]
        lam = barycentric(mesh.coords[el], pts)
        fv = eval_field(f, mesh, el, pts)
        contrib = np.einsum("nq,nqi->ni", w * fv, lam)
        for i in range(3):
            be[:, i] += np.bincount(parent, weights=contrib[:, i], minlength=len(act))

    # Nitsche terms on Gamma_K
    pos = np.flatnonzero(cut.has_gamma[act])
    cut_el = act[pos]
    if cut_el.size:
        kn, pts, w, lam, dn, t = nitsche_element_terms(cut, cut_el, beta)
        ke[pos] += kn
        gq = g_h.on_segments(cut.seg_a[cut_el], cut.seg_b[cut_el], t, cut_el)
        hK = mesh.diameters[cut_el]
        be[pos] += -dn * (w * gq).sum(axis=1)[:, None]
        be[pos] += (beta / hK)[:, None] * np.einsum("nq,nqi->ni", w * gq, lam)
    ke = _sym(ke)

    edofs = space.element_dofs(act)
    rows = [np.repeat(edofs, 3, axis=1).ravel()]
    cols = [np.tile(edofs, (1, 3)).ravel()]
    vals = [ke.ravel()]

    gf = cut.ghost_facets
    if gamma > 0 and gf.size:
        kg, verts, _ = ghost_facet_terms(cut, gf, gamma)
        gd = space.dof_of_vertex[verts]
        rows.append(np.repeat(gd, 6, axis=1).ravel())
        cols.append(np.tile(gd, (1, 6)).ravel())
        vals.append(_sym(kg).ravel())

    A = _accumulate(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), n)
    b = np.bincount(edofs.ravel(), weights=be.ravel(), minlength=n)
    diag = {"skipped_boundary_terms": int(cut.diagnostics.get("degenerate_segments", 0))}
    return LinearSystem(A=A, b=b, beta=float(beta), gamma=float(gamma), space=space, diagnostics=diag)


def ritz_values(alphas, betas):
    """Eigenvalues of the Lanczos matrix implied by the CG coefficients."""
    k = len(alphas)
    if k == 0:
        return np.zeros(0)
    d = 1.0 / alphas
    d[1:] += betas[:-1] / alphas[:-1]
    e = np.sqrt(np.abs(betas[:-1])) / alphas[:-1]
    if k == 1:
        return d
    return eigvalsh_tridiagonal(d, e)


def _cond(ritz):
    if ritz.size == 0:
        return np.nan
    a = np.abs(ritz)
    return float(a.max() / a.min()) if a.min() > 0 else np.inf


def condition_estimate(A, preconditioned=False, steps=None):
    """Spectral condition estimate ``max|lambda| / min|lambda|`` from a fully
    reorthogonalised Lanczos run on ``A`` (or on ``D^-1/2 A D^-1/2`` with
    ``preconditioned``).  With ``steps >= n`` the result is exact up to
    rounding.  Works for indefinite matrices too.
    """
    A = sp.csr_matrix(A)
    n = A.shape[0]
    if preconditioned:
        d = np.abs(A.diagonal())
        s = 1.0 / np.sqrt(np.where(d > 0, d, 1.0))
        A = sp.csr_matrix(sp.diags(s) @ A @ sp.diags(s))
    m = n if steps is None else min(n, int(steps))
    Q = np.zeros((m + 1, n))
    q = np.ones(n) + 0.01 * np.cos(np.arange(n))
    Q[0] = q / np.linalg.norm(q)
    al = np.zeros(m)
    be = np.zeros(m)
    k = m
    for j in range(m):
        w = A @ Q[j]
        al[j] = Q[j] @ w
        w -= Q[: j + 1].T @ (Q[: j + 1] @ w)
        w -= Q[: j + 1].T @ (Q[: j + 1] @ w)
        be[j] = np.linalg.norm(w)
        if be[j] <= 1e-13 * max(abs(al[: j + 1]).max(), 1e-300):
            k = j + 1
            break
        Q[j + 1] = w / be[j]
    ritz = eigvalsh_tridiagonal(al[:k], be[: k - 1]) if k > 1 else al[:1]
    return _cond(ritz)


def solve(system: LinearSystem, tol=1e-10, max_iter=None) -> Solution:
    """Jacobi-preconditioned CG; the Lanczos recurrence gives Ritz values
    of the preconditioned operator and a condition estimate."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    n = len(system.b)
    if max_iter is None:
        max_iter = 10 * max(n, 1)
    x, it, al, be, rel, ok = _pcg_safe(system.A, system.b, tol, max_iter)
    ritz = ritz_values(al, be)
    cond = _cond(ritz)
    if not ok:
        raise SolverError(f"CG did not converge in {it} iterations (relative residual {rel:.3e})",
                          residual=rel, iterations=it, cond_est=cond)
    rmin = float(ritz.min()) if ritz.size else np.nan
    rmax = float(ritz.max()) if ritz.size else np.nan
    return Solution(coeffs=x, iterations=it, rel_residual=rel, cond_est=cond,
                    ritz_min=rmin, ritz_max=rmax, space=system.space)


def _pcg_safe(A, b, tol, maxit):
    diag = A.diagonal()
    if np.all(diag > 0):
        return _kernels.pcg(A, b, tol, maxit)
    # indefinite diagonal (no ghost penalty, tiny cuts): scale symmetrically
    # by |diag| and run plain CG so Ritz values are still reported
    s = 1.0 / np.sqrt(np.where(diag != 0, np.abs(diag), 1.0))
    S = sp.diags(s)
    y, it, al, be, rel, ok = _pcg_identity(sp.csr_matrix(S @ A @ S), s * b, tol, maxit)
    return s * y, it, al, be, rel, ok


def _pcg_identity(A, b, tol, maxit):
    x = np.zeros_like(b)
    r = b.copy()
    rz0 = r @ r
    alphas, betas = [], []
    if rz0 == 0:
        return x, 0, np.zeros(0), np.zeros(0), 0.0, True
    p = r.copy()
    rz = rz0
    rel = 1.0
    for it in range(1, maxit + 1):
        q = A @ p
        alpha = rz / (p @ q)
        x += alpha * p
        r -= alpha * q
        rz_new = r @ r
        beta = rz_new / rz
        alphas.append(alpha)
        betas.append(beta)
        rel = np.sqrt(rz_new / rz0)
        if rel <= tol:
            return x, it, np.array(alphas), np.array(betas), rel, True
        p = r + beta * p
        rz = rz_new
    return x, maxit, np.array(alphas), np.array(betas), rel, False


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------

def _coeffs(v):
    return v.coeffs if isinstance(v, Solution) else np.asarray(v, dtype=float)


def discrete_energy_norm(v, space: FeSpace) -> float:
    cut = space.cut
    mesh = cut.mesh
    c = space.to_vertices(_coeffs(v))
    act = cut.active
    grad = np.einsum("nid,ni->nd", mesh.gradients[act], c[mesh.triangles[act]])
    total = float(np.sum(cut.area_in[act] * np.einsum("nd,nd->n", grad, grad)))
    ce = np.flatnonzero(cut.has_gamma)
    if ce.size:
        hK = mesh.diameters[ce]
        g = np.einsum("nid,ni->nd", mesh.gradients[ce], c[mesh.triangles[ce]])
        dn = np.einsum("nd,nd->n", g, cut.normal[ce])
        total += float(np.sum(hK * dn ** 2 * cut.gamma_len[ce]))
        pts, w = segment_rule(cut.seg_a[ce], cut.seg_b[ce], BOUNDARY_ORDER)
        lam = barycentric(mesh.coords[ce], pts)
        vq = np.einsum("nqi,ni->nq", lam, c[mesh.triangles[ce]])
        total += float(np.sum((w * vq ** 2).sum(axis=1) / hK))
    return float(np.sqrt(total))


def graded_triangles(tri, corner, levels):
    """Split ``tri`` into sub-triangles graded towards local vertex ``corner``."""
    out = []
    cur = np.roll(np.asarray(tri, dtype=float), -corner, axis=0)
    for _ in range(levels):
        p0, p1, p2 = cur
        m01, m12, m20 = 0.5 * (p0 + p1), 0.5 * (p1 + p2), 0.5 * (p2 + p0)
        out += [np.array([m01, p1, m12]), np.array([m20, m12, p2]), np.array([m01, m12, m20])]
        cur = np.array([p0, m01, m20])
    out.append(cur)
    return np.array(out)


def _mask(w, pts, phi):
    if phi is None:
        return w
    return np.where(phi(pts[..., 0], pts[..., 1]) > 0, 0.0, w)


def _tri_error_sq(tris, parent_grad, grad_u, singular_points, levels=12, phi=None):
    """Sum of |grad u - g_h|^2 over triangles with constant discrete gradient.

    With ``phi`` given, quadrature points where ``phi > 0`` are dropped so
    only the part inside the exact domain counts.
    """
    if len(tris) == 0:
        return 0.0
    tris = np.asarray(tris, dtype=float)
    sing = np.zeros(len(tris), dtype=bool)
    corner = np.zeros(len(tris), dtype=np.int64)
    for s in singular_points:
        d = np.hypot(tris[..., 0] - s[0], tris[..., 1] - s[1])
        scale = np.hypot(*(tris[:, 1] - tris[:, 0]).T)
        hit = d <= 1e-12 * scale[:, None]
        has = hit.any(axis=1)
        sing |= has
        corner[has] = hit[has].argmax(axis=1)
    total = 0.0
    reg = ~sing
    if reg.any():
        pts, w = quadrature_triangles(tris[reg], ERROR_ORDER)
        w = _mask(w, pts, phi)
        gx, gy = grad_u(pts[..., 0], pts[..., 1])
        ex = gx - parent_grad[reg][:, None, 0]
        ey = gy - parent_grad[reg][:, None, 1]
        total += float(np.sum(w * (ex * ex + ey * ey)))
    for k in np.flatnonzero(sing):
        sub = graded_triangles(tris[k], corner[k], levels)
        pts, w = quadrature_triangles(sub, ERROR_ORDER)
        w = _mask(w, pts, phi)
        gx, gy = grad_u(pts[..., 0], pts[..., 1])
        ex = gx - parent_grad[k, 0]
        ey = gy - parent_grad[k, 1]
        total += float(np.sum(w * (ex * ex + ey * ey)))
    return total


def energy_error(u_h, grad_u, space: FeSpace, bc_mesh, singular_points=(), per_element=False,
                 phi=None):
    """``||grad(u - u_h)||`` over ``Omega``.

    Uncut elements use the whole element; on cut elements the boundary
    correction sub-triangles, which tile ``K cap Omega``, carry the integral.
    Passing the exact level set ``phi`` also discards quadrature points
    outside ``Omega``, which matters where a thin excluded region crosses an
    element without changing the sign of ``phi_h`` at its vertices.
    """
    if grad_u is None:
        raise UnsupportedDiagnosticError("true error needs an exact gradient")
    cut = space.cut
    mesh = cut.mesh
    c = space.to_vertices(_coeffs(u_h))
    grads = np.einsum("nid,ni->nd", mesh.gradients, c[mesh.triangles])
    inside = cut.inside_elements
    err = np.zeros(mesh.ntriangles)
    if per_element:
        for k in inside:
            err[k] = _tri_error_sq(mesh.coords[[k]], grads[[k]], grad_u, singular_points, phi=phi)
        for j, k in enumerate(bc_mesh.parent):
            err[k] += _tri_error_sq(bc_mesh.coords[[j]], grads[[k]], grad_u, singular_points, phi=phi)
        return np.sqrt(err)
    total = _tri_error_sq(mesh.coords[inside], grads[inside], grad_u, singular_points, phi=phi)
    if len(bc_mesh.triangles):
        total += _tri_error_sq(bc_mesh.coords, grads[bc_mesh.parent], grad_u, singular_points, phi=phi)
    return float(np.sqrt(total))
