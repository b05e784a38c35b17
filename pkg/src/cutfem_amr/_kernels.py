"""Hot inner loops, each with a numba and a plain numpy implementation.

The numba path is used when numba imports and the environment variable
``CUTFEM_AMR_NO_NUMBA`` is unset (or ``0``).  Both paths produce the same
results up to floating point summation order; ``tests/test_kernels.py``
checks that.
"""
import os

import numpy as np
import scipy.sparse as sp

OUTSIDE, INSIDE, CUT, DEGENERATE = 0, 1, 2, -1

_disabled = os.environ.get("CUTFEM_AMR_NO_NUMBA", "0").lower() not in ("", "0", "false", "no")

try:
    import numba as _nb
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _disabled


# ---------------------------------------------------------------------------
# triangle clipping against the zero set of a linear function
# ---------------------------------------------------------------------------

def _clip_triangles_numpy(xy, vals, gid):
    n = xy.shape[0]
    s = np.sign(vals).astype(np.int64)
    neg = (s < 0).any(axis=1)
    pos = (s > 0).any(axis=1)
    allzero = (s == 0).all(axis=1)
    cls = np.full(n, OUTSIDE, dtype=np.int8)
    cls[~pos] = INSIDE
    cls[neg & pos] = CUT
    cls[allzero] = DEGENERATE

    # walk v0, r01, v1, r12, v2, r20
    cand = np.zeros((n, 6, 2))
    keep = np.zeros((n, 6), dtype=bool)
    zero = np.zeros((n, 6), dtype=bool)
    for i in range(3):
        j = (i + 1) % 3
        cand[:, 2 * i] = xy[:, i]
        keep[:, 2 * i] = s[:, i] <= 0
        zero[:, 2 * i] = s[:, i] == 0
        change = s[:, i] * s[:, j] < 0
        # orient every edge from its lower global vertex id so that shared
        # edges produce bit-identical roots in both neighbours
        lo_is_i = gid[:, i] < gid[:, j]
        a = np.where(lo_is_i, i, j)
        b = np.where(lo_is_i, j, i)
        rows = np.arange(n)
        va = vals[rows, a]
        vb = vals[rows, b]
        den = np.where(change, va - vb, 1.0)
        t = np.where(change, va / den, 0.0)
        pa = xy[rows, a]
        pb = xy[rows, b]
        cand[:, 2 * i + 1] = pa + t[:, None] * (pb - pa)
        keep[:, 2 * i + 1] = change
        zero[:, 2 * i + 1] = change

    order = np.argsort(~keep, axis=1, kind="stable")[:, :4]
    poly = np.take_along_axis(cand, order[:, :, None], axis=1)
    npoly = keep.sum(axis=1)
    poly[np.arange(4)[None, :] >= npoly[:, None]] = 0.0

    zorder = np.argsort(~zero, axis=1, kind="stable")[:, :2]
    zpts = np.take_along_axis(cand, zorder[:, :, None], axis=1)
    nz = np.minimum(zero.sum(axis=1), 2)
    zpts[np.arange(2)[None, :] >= nz[:, None]] = 0.0
    return cls, poly, npoly, zpts, nz


if HAVE_NUMBA:
    @_nb.njit(cache=True)
    def _clip_triangles_numba(xy, vals, gid):
        n = xy.shape[0]
        cls = np.empty(n, dtype=np.int8)
        poly = np.zeros((n, 4, 2))
        npoly = np.zeros(n, dtype=np.int64)
        zpts = np.zeros((n, 2, 2))
        nz = np.zeros(n, dtype=np.int64)
        s = np.empty(3, dtype=np.int64)
        for e in range(n):
            nneg = 0
            npos = 0
            for i in range(3):
                v = vals[e, i]
                if v < 0.0:
                    s[i] = -1
                    nneg += 1
                elif v > 0.0:
                    s[i] = 1
                    npos += 1
                else:
                    s[i] = 0
            if nneg == 0 and npos == 0:
                cls[e] = DEGENERATE
            elif nneg > 0 and npos > 0:
                cls[e] = CUT
            elif npos == 0:
                cls[e] = INSIDE
            else:
                cls[e] = OUTSIDE
            k = 0
            kz = 0
            for i in range(3):
                j = (i + 1) % 3
                if s[i] <= 0:
                    poly[e, k, 0] = xy[e, i, 0]
                    poly[e, k, 1] = xy[e, i, 1]
                    k += 1
                if s[i] == 0 and kz < 2:
                    zpts[e, kz, 0] = xy[e, i, 0]
                    zpts[e, kz, 1] = xy[e, i, 1]
                    kz += 1
                if s[i] * s[j] < 0:
                    if gid[e, i] < gid[e, j]:
                        a = i
                        b = j
                    else:
                        a = j
                        b = i
                    t = vals[e, a] / (vals[e, a] - vals[e, b])
                    x = xy[e, a, 0] + t * (xy[e, b, 0] - xy[e, a, 0])
                    y = xy[e, a, 1] + t * (xy[e, b, 1] - xy[e, a, 1])
                    poly[e, k, 0] = x
                    poly[e, k, 1] = y
                    k += 1
                    if kz < 2:
                        zpts[e, kz, 0] = x
                        zpts[e, kz, 1] = y
                        kz += 1
            npoly[e] = k
            nz[e] = kz
        return cls, poly, npoly, zpts, nz


def clip_triangles(xy, vals, gid, use_numba=None):
    """Clip triangles against ``{phi_h <= 0}`` for linear nodal values.

    Returns ``(cls, poly, npoly, zpts, nz)``: classification codes, the
    counter-clockwise inside polygon (padded to 4 vertices), its vertex
    count, and up to two points where ``phi_h`` vanishes on the element
    boundary (zero vertices and edge roots, in walk order).
    """
    xy = np.ascontiguousarray(xy, dtype=np.float64)
    vals = np.ascontiguousarray(vals, dtype=np.float64)
    gid = np.ascontiguousarray(gid, dtype=np.int64)
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba and HAVE_NUMBA:
        return _clip_triangles_numba(xy, vals, gid)
    return _clip_triangles_numpy(xy, vals, gid)


# ---------------------------------------------------------------------------
# Jacobi preconditioned conjugate gradients
# ---------------------------------------------------------------------------

def _pcg_numpy(indptr, indices, data, b, dinv, tol, maxit):
    n = b.shape[0]
    A = sp.csr_matrix((data, indices, indptr), shape=(n, n))
    x = np.zeros(n)
    alphas = np.zeros(maxit)
    betas = np.zeros(maxit)
    r = b.copy()
    z = dinv * r
    rz = r @ z
    rz0 = rz
    if rz0 <= 0.0:
        return x, 0, alphas, betas, 0.0, True
    p = z.copy()
    it = 0
    rel = 1.0
    while it < maxit:
        q = A @ p
        pq = p @ q
        alpha = rz / pq
        x += alpha * p
        r -= alpha * q
        z = dinv * r
        rz_new = r @ z
        beta = rz_new / rz
        alphas[it] = alpha
        betas[it] = beta
        it += 1
        rel = np.sqrt(abs(rz_new) / rz0)
        if rel <= tol:
            return x, it, alphas, betas, rel, True
        p = z + beta * p
        rz = rz_new
    return x, it, alphas, betas, rel, False


if HAVE_NUMBA:
    @_nb.njit(cache=True)
    def _pcg_numba(indptr, indices, data, b, dinv, tol, maxit):
        n = b.shape[0]
        x = np.zeros(n)
        alphas = np.zeros(maxit)
        betas = np.zeros(maxit)
        r = b.copy()
        z = dinv * r
        rz = 0.0
        for i in range(n):
            rz += r[i] * z[i]
        rz0 = rz
        if rz0 <= 0.0:
            return x, 0, alphas, betas, 0.0, True
        p = z.copy()
        q = np.zeros(n)
        it = 0
        rel = 1.0
        while it < maxit:
            pq = 0.0
            for i in range(n):
                acc = 0.0
                for k in range(indptr[i], indptr[i + 1]):
                    acc += data[k] * p[indices[k]]
                q[i] = acc
                pq += p[i] * acc
            alpha = rz / pq
            rz_new = 0.0
            for i in range(n):
                x[i] += alpha * p[i]
                r[i] -= alpha * q[i]
                z[i] = dinv[i] * r[i]
                rz_new += r[i] * z[i]
            beta = rz_new / rz
            alphas[it] = alpha
            betas[it] = beta
            it += 1
            rel = np.sqrt(abs(rz_new) / rz0)
            if rel <= tol:
                return x, it, alphas, betas, rel, True
            for i in range(n):
                p[i] = z[i] + beta * p[i]
            rz = rz_new
        return x, it, alphas, betas, rel, False


def pcg(A, b, tol, maxit, use_numba=None):
    """Run Jacobi-PCG on a CSR matrix.

    Returns ``(x, iterations, alphas, betas, rel_residual, converged)``;
    ``alphas``/``betas`` are the CG step coefficients (trimmed), from which
    the Lanczos tridiagonal matrix can be rebuilt.
    """
    A = sp.csr_matrix(A)
    b = np.ascontiguousarray(b, dtype=np.float64)
    diag = A.diagonal()
    if np.any(diag <= 0.0):
        raise ValueError("matrix has a non-positive diagonal entry")
    dinv = 1.0 / diag
    if use_numba is None:
        use_numba = USE_NUMBA
    args = (A.indptr.astype(np.int64), A.indices.astype(np.int64),
            A.data.astype(np.float64), b, dinv, float(tol), int(maxit))
    if use_numba and HAVE_NUMBA:
        x, it, al, be, rel, ok = _pcg_numba(*args)
    else:
        x, it, al, be, rel, ok = _pcg_numpy(*args)
    return x, int(it), al[:it], be[:it], float(rel), bool(ok)
