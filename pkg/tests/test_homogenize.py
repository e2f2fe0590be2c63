import numpy as np
import pytest
import sympy

from perfmsfem.fem import AdvectionField
from perfmsfem.geometry import EMPTY, O1, O2, Motif, scaled_o1
from perfmsfem.harness import paper_f
from perfmsfem.homogenize import (b_star_from_cellwise, build_cell_mesh, decompose_drift,
                                  effective_tensors, rate_study_neumann, solve_dirichlet_cell,
                                  solve_homogenized, solve_neumann_correctors)
from perfmsfem.metrics import locate
from perfmsfem.reference import solve_reference

R = 32


def node_ij(r):
    p = np.arange(r * r)
    return p % r, p // r


def swap(r):
    i, j = node_ij(r)
    return j + r * i


def inversion(r):
    i, j = node_ij(r)
    return (-i) % r + r * ((-j) % r)


def test_cell_mesh_pairing_is_an_involution():
    mesh = build_cell_mesh(O1, 8)
    ids = np.arange((mesh.r + 1) ** 2)
    assert np.array_equal(mesh.pair(mesh.pair(ids)), ids)
    assert np.array_equal(mesh.wrap(mesh.pair(ids)), mesh.wrap(ids))
    assert mesh.porosity == pytest.approx(0.75)


def test_dirichlet_cell_symmetry_and_sign():
    res = solve_dirichlet_cell(1.0, None, O1, R)
    w = res.w
    fluid_only = res.mesh.fluid_nodes & ~res.mesh.solid_nodes
    assert np.all(w[fluid_only] > 0) and np.all(w[res.mesh.solid_nodes] == 0)
    # the diagonal-cut mesh keeps the swap and the point inversion exactly
    assert np.abs(w - w[swap(R)]).max() <= 1e-9
    assert np.abs(w - w[inversion(R)]).max() <= 1e-9


def test_dirichlet_cell_linear_in_alpha():
    w1 = solve_dirichlet_cell(1.0, None, O1, R).w
    w2 = solve_dirichlet_cell(2.0, None, O1, R).w
    assert np.abs(w2 - 0.5 * w1).max() <= 1e-12 * np.abs(w1).max()


def test_dirichlet_cell_with_drift_self_converges():
    vals = []
    for r in (32, 64):
        res = solve_dirichlet_cell(1.0, (1.0, 1.0), O1, r)
        i, j = node_ij(r)
        probe = (i == r // 8) & (j == r // 8)
        vals.append(res.w[probe][0])
        assert np.abs(res.w - res.w[swap(r)]).max() <= 1e-9  # b = (1,1) keeps the swap
        assert np.abs(res.w - res.w[inversion(r)]).max() > 1e-4  # but breaks the inversion
    assert abs(vals[0] - vals[1]) <= 0.02 * abs(vals[1])


def test_dirichlet_cell_rejections():
    with pytest.raises(ValueError):
        solve_dirichlet_cell(1.0, None, EMPTY, 8)
    with pytest.raises(ValueError):
        solve_dirichlet_cell(1.0, None, O2, 8)  # touches the cell boundary
    growing = AdvectionField(lambda x: x.copy())  # div b = 2 > 0
    with pytest.raises(ValueError):
        solve_dirichlet_cell(1.0, growing, O1, 8)


def test_neumann_correctors_empty_motif():
    res = solve_neumann_correctors(0.7, EMPTY, 16)
    assert np.abs(res.w).max() <= 1e-12
    A, bs = effective_tensors(res, 0.7, (1.0, -2.0))
    assert np.abs(A - 0.7 * np.eye(2)).max() <= 1e-10
    assert np.abs(bs - [1.0, -2.0]).max() <= 1e-10


def test_neumann_correctors_swap_symmetry():
    res = solve_neumann_correctors(1.0, O1, R)
    assert np.abs(res.w[0] - res.w[1][swap(R)]).max() <= 1e-8
    A = res.A_star
    assert abs(A[0, 0] - A[1, 1]) <= 1e-6 and abs(A[0, 1]) <= 1e-6 and abs(A[1, 0]) <= 1e-6


def test_neumann_correctors_disconnected_fluid():
    strips = Motif(((0.0, 1.0, 0.2, 0.3), (0.0, 1.0, 0.7, 0.8)))
    with pytest.raises(ValueError):
        solve_neumann_correctors(1.0, strips, 20)


def test_effective_tensor_bounds_and_shrinking_motifs():
    alpha = 0.5
    gaps = []
    for r in (0.8, 0.4, 0.2):
        A = solve_neumann_correctors(alpha, scaled_o1(r), 40).A_star
        lam = np.linalg.eigvalsh(0.5 * (A + A.T))
        assert 0 < lam[0] <= lam[1] <= alpha * (1 + 1e-12)
        gaps.append(np.abs(A - alpha * np.eye(2)).max())
    assert gaps[0] > gaps[1] > gaps[2]


def test_b_star_identity_symbolic():
    alpha = sympy.symbols("alpha", positive=True)
    b = sympy.Matrix(sympy.symbols("b1 b2"))
    # I[i, j] = integral of (e_i + grad w_i)_j over the fluid
    I = sympy.Matrix(2, 2, sympy.symbols("I11 I12 I21 I22"))
    A = alpha * I.T  # column i of A* is alpha * integral of (e_i + grad w_i)
    b_star = sympy.Matrix([sum(b[j] * I[i, j] for j in range(2)) for i in range(2)])
    assert sympy.simplify(b_star - A.T * b / alpha) == sympy.zeros(2, 1)


@pytest.mark.parametrize("motif", [O1, O2])
def test_b_star_identity_numeric(motif):
    res = solve_neumann_correctors(0.3, motif, R)
    b = np.array([1.0, 2.5])
    A, bs = effective_tensors(res, 0.3, b)
    assert np.abs(bs - A.T @ b / 0.3).max() <= 1e-8 * np.abs(bs).max()


def test_a_star_richardson():
    a = [solve_neumann_correctors(1.0, O1, r).A_star[0, 0] for r in (16, 32, 64)]
    p = np.log2((a[0] - a[1]) / (a[1] - a[2]))
    extrapolated = a[2] - (a[1] - a[2]) / (2 ** p - 1)
    assert abs(a[2] - extrapolated) <= 0.005 * extrapolated
    assert extrapolated == pytest.approx(0.5773, rel=5e-3)


def test_drift_decomposition_constant_field_no_holes():
    phi, B, mesh, residual = decompose_drift((0.4, -1.0), EMPTY, 16)
    assert np.abs(phi).max() <= 1e-12 and np.abs(B - [0.4, -1.0]).max() <= 1e-12


def test_drift_decomposition_gradient_field_no_holes():
    r = 16
    i, j = np.meshgrid(np.arange(r + 1), np.arange(r + 1), indexing="xy")
    psi = (np.sin(2 * np.pi * i / r) * np.cos(2 * np.pi * j / r)).ravel()
    mesh = build_cell_mesh(EMPTY, r)
    grad = np.einsum("ci,cik->ck", psi[mesh.cells], mesh.grads)
    field = AdvectionField(lambda x: grad[locate(x, r)])  # discrete gradient, cell by cell
    phi, B, _, _ = decompose_drift(field, EMPTY, r)
    assert np.abs(B).max() <= 1e-8


def test_drift_decomposition_o1():
    phi, B, mesh, residual = decompose_drift((1.0, 1.0), O1, R)
    assert residual <= 1e-8
    res = solve_neumann_correctors(1.0, O1, R)
    _, direct = effective_tensors(res, 1.0, (1.0, 1.0))
    assert np.abs(b_star_from_cellwise(res, B) - direct).max() <= 1e-8


def test_homogenized_solve_examples():
    assert not solve_homogenized(np.eye(2), (1.0, 1.0), 0.75, 0.0, 16).u.any()
    corr = solve_neumann_correctors(0.2, EMPTY, 8)
    A, bs = effective_tensors(corr, 0.2, (1.0, 2.0))
    hom = solve_homogenized(A, bs, corr.porosity, paper_f, 32)
    ref = solve_reference(None, 0.2, (1.0, 2.0), paper_f, 32)
    assert np.abs(hom.u - ref.u).max() <= 1e-9


def test_homogenized_layer_follows_drift():
    corr = solve_neumann_correctors(1 / 64, O1, 16)
    A, bs = effective_tensors(corr, 1 / 64, (1.0, 1.0))
    hom = solve_homogenized(A, bs, corr.porosity, paper_f, 128)
    n1 = 129
    k = int(np.argmax(hom.u))
    x, y = (k % n1) / 128, (k // n1) / 128
    assert x > 0.8 and y > 0.8  # peak pushed toward the outflow corner
    u = hom.u.reshape(n1, n1)
    assert u[-2, 64] < 0.5 * u[:, 64].max()  # sharp drop in the top layer


def test_neumann_rate_empty_motif():
    table = rate_study_neumann(0.25, EMPTY, paper_f, [1 / 4, 1 / 8], (1.0, 1.0), 4)
    assert max(table.errors) <= 1e-10 and max(table.baseline) <= 1e-10
