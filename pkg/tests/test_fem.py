import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from types import SimpleNamespace

from perfmsfem.fem import (AdvectionField, SolverError, SparseSystem, assemble_form, cell_gradients,
                           edge_average_functional, load_vector, operator_matrix, solve_sparse)
from perfmsfem.geometry import O1, DomainSpec, Motif, Periodic
from perfmsfem.mesh import build_coarse_mesh, build_fine_grid, build_fine_mesh


def unit_triangle():
    return SimpleNamespace(points=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
                           cells=np.array([[0, 1, 2]]), cell_fluid=np.array([True]))


def test_reference_triangle_stiffness():
    K = assemble_form(unit_triangle(), 1.0, None, "diffusion").toarray()
    expected = 0.5 * np.array([[2.0, -1, -1], [-1, 1, 0], [-1, 0, 1]])
    assert np.allclose(K, expected, atol=1e-15)


def test_reference_triangle_mass_and_advection():
    mesh = unit_triangle()
    M = assemble_form(mesh, 1.0, None, "mass").toarray()
    assert M.sum() == pytest.approx(0.5)
    assert np.allclose(M, np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]) / 24)
    # int (b.grad phi_j) phi_i = (area/3) b.grad phi_j
    A = assemble_form(mesh, 1.0, (2.0, 3.0), "advection").toarray()
    gj = np.array([-5.0, 2.0, 3.0])
    assert np.allclose(A, np.tile(gj / 6, (3, 1)))


def test_rejects_nonpositive_alpha():
    with pytest.raises(ValueError):
        assemble_form(unit_triangle(), 0.0, None, "diffusion")
    with pytest.raises(ValueError):
        assemble_form(unit_triangle(), 1.0, None, "curl")


def small_mesh(spec=None, t=1, m=3, N=2):
    return build_fine_mesh(build_coarse_mesh(N), t, spec, m)


def test_constant_field_divergence_term_vanishes():
    D = assemble_form(small_mesh(), 1.0, (3.0, -1.0), "divergence_term")
    assert abs(D).max() == 0.0


def test_skew_form_antisymmetric():
    S = assemble_form(small_mesh(DomainSpec(0.2, Periodic(O1))), 1.0, (1.5, -0.7), "skew_advection_c")
    assert abs(S + S.T).max() < 1e-14


def test_divergence_term_for_variable_field():
    mesh = build_fine_grid(8)
    b = AdvectionField(lambda x: np.stack([-x[:, 0], np.zeros(len(x))], axis=1))  # div b = -1
    D = assemble_form(mesh, 1.0, b, "divergence_term")
    M = assemble_form(mesh, 1.0, None, "mass")
    assert np.allclose(D.toarray(), 0.5 * M.toarray(), atol=1e-8)
    # c(u,u) = a(u,u) for u vanishing on the boundary (exact for constant b)
    C = operator_matrix(mesh, 1.0, (0.8, -2.0), "c")
    A = operator_matrix(mesh, 1.0, (0.8, -2.0), "a")
    u = np.random.default_rng(1).random(mesh.n_nodes)
    u[mesh.boundary_nodes] = 0.0
    assert u @ (C @ u) == pytest.approx(u @ (A @ u), rel=1e-12)


def test_diffusion_kernel_is_constants():
    mesh = small_mesh(m=2)
    K = assemble_form(mesh, 0.3, None, "diffusion").toarray()
    assert np.allclose(K, K.T)
    w = np.linalg.eigvalsh(K)
    assert w[0] > -1e-12 and abs(w[0]) < 1e-12 and w[1] > 1e-8
    assert np.allclose(K @ np.ones(len(K)), 0.0, atol=1e-13)


def test_cell_gradients_of_linear_field():
    mesh = small_mesh(m=3)
    u = 2 * mesh.points[:, 0] - 5 * mesh.points[:, 1]
    assert np.allclose(cell_gradients(mesh, u), [2.0, -5.0])
    assert load_vector(mesh, np.ones(mesh.n_nodes)).sum() == pytest.approx(mesh.areas.sum())


def _bottom_trace(mesh):
    return next(tr for tr in mesh.traces if not tr.interior and
                np.allclose(mesh.points[tr.nodes][:, 1], 0.0))


def test_edge_functional_examples():
    mesh = build_fine_mesh(build_coarse_mesh(1), 0, None, 4)
    tr = _bottom_trace(mesh)
    x = mesh.points[:, 0]
    for mode in ("dirichlet", "neumann"):
        r = edge_average_functional(mesh, tr, mode)
        assert r @ np.ones(mesh.n_nodes) == pytest.approx(1.0, abs=1e-14)
        assert r @ x == pytest.approx(0.5, abs=1e-14)


def test_edge_functional_half_covered():
    # a hole on the left half of the bottom edge
    spec = DomainSpec(1.0, Periodic(Motif(((0.0, 0.5, 0.0, 0.25),))), "neumann")
    mesh = build_fine_mesh(build_coarse_mesh(1), 0, spec, 4)
    tr = _bottom_trace(mesh)
    r = edge_average_functional(mesh, tr, "neumann")
    assert r @ np.ones(mesh.n_nodes) == pytest.approx(0.5, abs=1e-14)
    rd = edge_average_functional(mesh, tr, "dirichlet")
    assert np.all(rd[mesh.node_solid] == 0.0)


def test_edge_functional_degenerate_edge():
    spec = DomainSpec(1.0, Periodic(Motif(((0.0, 1.0, 0.0, 0.25),))), "neumann")
    mesh = build_fine_mesh(build_coarse_mesh(1), 0, spec, 4)
    assert not np.any(edge_average_functional(mesh, _bottom_trace(mesh), "neumann"))


def test_solve_sparse_small_examples():
    b = np.array([0.3, -2.0, 7.5])
    assert np.array_equal(solve_sparse(sp.identity(3, format="csr"), b), b)
    x = solve_sparse(SparseSystem(sp.csr_matrix([[2.0, 1.0], [1.0, 2.0]]), np.array([3.0, 3.0])), symmetry_hint="spd")
    assert np.allclose(x, [1.0, 1.0], atol=1e-14)


def test_solve_sparse_matches_dense_lu():
    grid = build_fine_grid(12)
    A = (assemble_form(grid, 0.1, None, "diffusion") + assemble_form(grid, 0.1, (1.0, 2.0), "advection")).tocsr()
    free = np.setdiff1d(np.arange(grid.n_nodes), grid.boundary_nodes)
    A = A[free][:, free]
    assert A.shape[0] <= 200
    rhs = np.random.default_rng(3).standard_normal(A.shape[0])
    x = solve_sparse(A, rhs)
    lu = sla.lu_factor(A.toarray())
    xd = sla.lu_solve(lu, rhs)
    assert np.max(np.abs(x - xd)) <= 1e-10 * np.max(np.abs(xd))
    assert np.array_equal(x, solve_sparse(A, rhs))  # deterministic


def test_solve_sparse_reports_singularity():
    A = sp.csr_matrix(np.array([[1.0, 2.0], [2.0, 4.0]]))
    with pytest.raises(SolverError):
        solve_sparse(A, np.array([1.0, 0.0]))


def test_sparse_system_finalize_merges_duplicates():
    A = sp.coo_matrix((np.array([1.0, 2.0, 3.0]), (np.array([0, 0, 1]), np.array([0, 0, 1]))), shape=(2, 2))
    s = SparseSystem(A, np.zeros(2)).finalize()
    indptr, indices, data = s.csr_triplets
    assert list(indptr) == [0, 1, 2] and list(data) == [3.0, 3.0]


def test_discrete_poincare_scaling():
    ratios = []
    for k in (8, 16, 32, 64):
        eps = 1.0 / k
        grid = build_fine_grid(4 * k, DomainSpec(eps, Periodic(O1)))
        K = assemble_form(grid, 1.0, None, "diffusion")
        M = assemble_form(grid, 1.0, None, "mass")
        fixed = grid.node_solid.copy()
        fixed[grid.boundary_nodes] = True
        free = np.flatnonzero(~fixed)
        lam = spla.eigsh(K[free][:, free], k=1, M=M[free][:, free], sigma=0, which="LM")[0][0]
        ratios.append(1.0 / np.sqrt(lam) / eps)  # sup ||v|| / |v|_1, divided by eps
    assert max(ratios) / min(ratios) < 1.1
    assert max(ratios) < 0.5
