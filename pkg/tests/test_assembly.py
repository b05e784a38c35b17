import numpy as np
import pytest
import scipy.sparse as sp

from cutfem_amr.assembly import (
    BoundaryData, FeSpace, LinearSystem, P1Field, SolverError, UnsupportedDiagnosticError, assemble,
    condition_estimate, discrete_energy_norm, energy_error, ghost_facet_terms, solve,
)
from cutfem_amr.estimator import build_bc_mesh
from cutfem_amr.geometry import Circle, Linear, interpolate_levelset
from cutfem_amr.mesh import TriMesh, build_background_mesh, extract_active, refine
from cutfem_amr.problems import example1, example2, example3, example4


def setup(phi, bbox=(-3, 3, -3, 3), n=16, mesh=None):
    mesh = mesh or build_background_mesh(bbox, n)
    cut = extract_active(mesh, interpolate_levelset(phi, mesh))
    return cut, FeSpace.from_cut(cut)


def lin(x, y):
    return 1 + 2 * x + 3 * y


def test_reference_element_matrix():
    mesh = TriMesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]])
    cut, space = setup(Linear(0, 0, -1), mesh=mesh)
    A = assemble(space, cut, 0.0, BoundaryData(0.0)).A.toarray()
    np.testing.assert_allclose(A, 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]]), atol=1e-15)


def test_uncut_is_standard_stiffness():
    cut, space = setup(Linear(0, 0, -1), bbox=(0, 1, 0, 1), n=3)
    A = assemble(space, cut, 0.0, BoundaryData(0.0)).A
    np.testing.assert_allclose(A @ np.ones(space.ndofs), 0, atol=1e-13)
    v = space.interpolate(lambda x, y: x)
    assert v @ (A @ v) == pytest.approx(1.0)


def test_ghost_penalty_vanishes_on_linear():
    cut, space = setup(Circle((0, 0), 2))
    ke, verts, J = ghost_facet_terms(cut, cut.ghost_facets, 0.1)
    v = lin(*cut.mesh.vertices.T)[verts]
    assert np.max(np.abs(np.einsum("ni,nij,nj->n", v, ke, v))) < 1e-12
    assert len(cut.ghost_facets) > 0


def test_symmetric_to_the_bit_flower():
    cut, space = setup(example1().levelset, bbox=(-4.5, 4.5, -4.5, 4.5))
    A = assemble(space, cut, example1().f, BoundaryData(0.0)).A
    assert (A != A.T).nnz == 0


def test_consistency_linear_solution():
    cut, space = setup(Circle((0.1, -0.2), 2))
    system = assemble(space, cut, 0.0, BoundaryData(lin))
    u = space.interpolate(lin)
    r = system.A @ u - system.b
    assert np.linalg.norm(r) <= 1e-10 * np.linalg.norm(system.b)


def test_patch_test():
    cut, space = setup(Circle((0, 0), 2))
    sol = solve(assemble(space, cut, 0.0, BoundaryData(lin)), tol=1e-12)
    assert np.max(np.abs(sol.coeffs - space.interpolate(lin))) <= 1e-8
    assert sol.rel_residual <= 1e-12


@pytest.mark.parametrize("mode", ["linear", "constant"])
def test_gh_modes_agree_for_constant_data(mode):
    cut, space = setup(Circle((0, 0), 2), n=10)
    sol = solve(assemble(space, cut, 0.0, BoundaryData(3.0, mode)), tol=1e-12)
    np.testing.assert_allclose(sol.coeffs, 3.0, atol=1e-9)


def test_nodal_g_mode_uses_mesh_interpolant():
    mesh = build_background_mesh((-3, 3, -3, 3), 10)
    cut, space = setup(Circle((0, 0), 2), mesh=mesh)
    g = BoundaryData(lin, "linear", mesh)
    a, b = cut.seg_a[cut.cut_elements], cut.seg_b[cut.cut_elements]
    vals = g.on_segments(a, b, np.array([0.0, 1.0]), cut.cut_elements)
    np.testing.assert_allclose(vals[:, 0], lin(*a.T), atol=1e-12)


def test_solve_zero_rhs():
    cut, space = setup(Circle((0, 0), 2), n=8)
    system = assemble(space, cut, 0.0, BoundaryData(0.0))
    sol = solve(system)
    assert sol.iterations == 0
    assert np.all(sol.coeffs == 0)


def test_solve_identity():
    b = np.arange(1.0, 6.0)
    system = LinearSystem(A=sp.identity(5, format="csr"), b=b, beta=10.0, gamma=0.1, space=None)
    sol = solve(system)
    np.testing.assert_allclose(sol.coeffs, b)
    assert sol.iterations == 1


def test_solver_error_carries_residual():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(40, 40))
    A = sp.csr_matrix(M @ M.T + 1e-3 * np.eye(40))
    system = LinearSystem(A=A, b=np.ones(40), beta=10.0, gamma=0.1, space=None)
    with pytest.raises(SolverError) as exc:
        solve(system, tol=1e-14, max_iter=3)
    assert exc.value.iterations == 3
    assert exc.value.residual > 1e-14


@pytest.mark.parametrize("make", [example1, example2, example3, example4])
@pytest.mark.parametrize("refinements", [0, 1])
def test_positive_ritz_values(make, refinements):
    p = make()
    mesh = build_background_mesh(p.bbox, p.n0)
    for _ in range(refinements):
        mesh = refine(mesh, np.arange(mesh.ntriangles))
    cut, space = setup(p.levelset, mesh=mesh)
    sol = solve(assemble(space, cut, p.f if np.isscalar(p.f) else 1.0, BoundaryData(p.g)))
    assert sol.ritz_min > 0
    assert sol.cond_est >= 1


def test_condition_estimate_matches_dense():
    cut, space = setup(Circle((0, 0), 2), n=8)
    A = assemble(space, cut, 0.0, BoundaryData(0.0)).A
    ev = np.linalg.eigvalsh(A.toarray())
    assert condition_estimate(A) == pytest.approx(ev[-1] / ev[0], rel=1e-8)


def test_energy_norm_examples():
    cut, space = setup(Linear(0, 0, -1), bbox=(0, 1, 0, 1), n=4)
    assert discrete_energy_norm(np.zeros(space.ndofs), space) == 0
    assert discrete_energy_norm(np.full(space.ndofs, 2.5), space) == pytest.approx(0, abs=1e-13)
    assert discrete_energy_norm(space.interpolate(lambda x, y: x), space) == pytest.approx(1.0)


def test_energy_norm_boundary_terms():
    cut, space = setup(Circle((0, 0), 2), n=8)
    c = np.ones(space.ndofs)
    # constant: only the h_K^-1 ||v||^2 term survives
    hK = cut.mesh.diameters[cut.cut_elements]
    expect = np.sqrt(np.sum(cut.gamma_len[cut.cut_elements] / hK))
    assert discrete_energy_norm(c, space) == pytest.approx(expect, rel=1e-12)


def test_energy_error_examples():
    phi = Linear(0, 0, -1)
    cut, space = setup(phi, bbox=(0, 1, 0, 1), n=4)
    sol = np.zeros(space.ndofs)
    bc = build_bc_mesh(cut, phi, sol, 0.0)
    err = energy_error(sol, lambda x, y: (np.ones_like(x), np.zeros_like(y)), space, bc)
    assert err == pytest.approx(1.0, abs=1e-13)
    with pytest.raises(UnsupportedDiagnosticError):
        energy_error(sol, None, space, bc)


def test_energy_error_patch():
    phi = Circle((0, 0), 2)
    cut, space = setup(phi)
    sol = solve(assemble(space, cut, 0.0, BoundaryData(lin)), tol=1e-12)
    bc = build_bc_mesh(cut, phi, sol, lin)
    err = energy_error(sol, lambda x, y: (2 + 0 * x, 3 + 0 * y), space, bc)
    assert err <= 1e-8


def test_energy_error_decreases_uniform_example3():
    p = example3()
    mesh = build_background_mesh(p.bbox, p.n0)
    errs = []
    for _ in range(2):
        cut, space = setup(p.levelset, mesh=mesh)
        sol = solve(assemble(space, cut, 0.0, BoundaryData(p.g)))
        bc = build_bc_mesh(cut, p.levelset, sol, p.g)
        errs.append(energy_error(sol, p.grad_exact, space, bc, p.singular_points, phi=p.levelset))
        mesh = refine(refine(mesh, np.arange(mesh.ntriangles)), np.arange(2 * mesh.ntriangles))
    assert errs[1] < errs[0]


def test_per_element_error_sums():
    p = example3()
    cut, space = setup(p.levelset, bbox=p.bbox, n=8)
    sol = solve(assemble(space, cut, 0.0, BoundaryData(p.g)))
    bc = build_bc_mesh(cut, p.levelset, sol, p.g)
    tot = energy_error(sol, p.grad_exact, space, bc, p.singular_points)
    per = energy_error(sol, p.grad_exact, space, bc, p.singular_points, per_element=True)
    assert np.sqrt(np.sum(per ** 2)) == pytest.approx(tot, rel=1e-10)


def test_p1_field_source():
    cut, space = setup(Circle((0, 0), 2), n=8)
    f = P1Field(np.ones(cut.mesh.nvertices))
    b1 = assemble(space, cut, f, BoundaryData(0.0)).b
    b2 = assemble(space, cut, 1.0, BoundaryData(0.0)).b
    np.testing.assert_allclose(b1, b2, atol=1e-14)


def test_bad_parameters():
    cut, space = setup(Circle((0, 0), 2), n=4)
    with pytest.raises(ValueError):
        assemble(space, cut, 0.0, BoundaryData(0.0), beta=0)
    with pytest.raises(ValueError):
        assemble(space, cut, 0.0, BoundaryData(0.0), gamma=-1)
    with pytest.raises(ValueError):
        BoundaryData(0.0, "quadratic")
