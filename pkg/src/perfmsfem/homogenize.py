"""Periodic cell problems, effective coefficients and homogenization rate studies.

The unit cell Y is meshed like the global lattice (``r x r`` squares cut
along the diagonal). Forms are assembled on the unwrapped ``(r+1)^2`` grid
and folded onto the ``r^2`` periodic nodes with a 0/1 identification matrix,
so periodicity holds by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .fem import as_field, assemble_form, constant_load, p1_geometry, solve_sparse
from .geometry import DomainSpec, Motif, Periodic
from .mesh import build_fine_grid, lattice_barycenters, lattice_cells
from .metrics import cell_h1_squared, cell_l2_squared as _l2_squared, lattice_size
from .reference import solve_reference


@dataclass
class PeriodicCellMesh:
    r: int
    motif: Motif
    points: np.ndarray  # unwrapped (r+1)^2 grid
    cells: np.ndarray
    cell_fluid: np.ndarray
    fold: sp.csr_matrix  # (r+1)^2 x r^2 identification
    areas: np.ndarray = field(repr=False, default=None)
    grads: np.ndarray = field(repr=False, default=None)
    barycenters: np.ndarray = field(repr=False, default=None)

    @property
    def n_periodic(self) -> int:
        return self.r * self.r

    @property
    def periodic_cells(self) -> np.ndarray:
        return self.wrap(self.cells)

    def wrap(self, ids: np.ndarray) -> np.ndarray:
        """Periodic node id of unwrapped node ids."""
        n1 = self.r + 1
        i, j = ids % n1, ids // n1
        return (i % self.r) + self.r * (j % self.r)

    def pair(self, ids: np.ndarray) -> np.ndarray:
        """Image of unwrapped boundary nodes under the opposite-face pairing."""
        n1 = self.r + 1
        i, j = ids % n1, ids // n1
        i = np.where(i == 0, self.r, np.where(i == self.r, 0, i))
        j = np.where(j == 0, self.r, np.where(j == self.r, 0, j))
        return i + n1 * j

    def fold_matrix(self, A: sp.spmatrix) -> sp.csr_matrix:
        return (self.fold.T @ A @ self.fold).tocsr()

    @property
    def fluid_nodes(self) -> np.ndarray:
        flag = np.zeros(self.n_periodic, dtype=bool)
        flag[self.periodic_cells[self.cell_fluid].ravel()] = True
        return flag

    @property
    def solid_nodes(self) -> np.ndarray:
        flag = np.zeros(self.n_periodic, dtype=bool)
        flag[self.periodic_cells[~self.cell_fluid].ravel()] = True
        return flag

    @property
    def porosity(self) -> float:
        return float(self.areas[self.cell_fluid].sum())

    def cell_gradients(self, values: np.ndarray) -> np.ndarray:
        return np.einsum("ci,cik->ck", values[self.periodic_cells], self.grads)


def build_cell_mesh(motif: Motif, r: int) -> PeriodicCellMesh:
    if r < 2:
        raise ValueError("cell resolution must be >= 2")
    i, j = np.meshgrid(np.arange(r + 1), np.arange(r + 1), indexing="xy")
    points = np.stack([i.ravel() / r, j.ravel() / r], axis=1)
    cells = lattice_cells(r)
    bary = lattice_barycenters(r)
    fluid = ~motif.contains(bary[:, 0], bary[:, 1])
    ids = np.arange((r + 1) ** 2)
    wrapped = (ids % (r + 1)) % r + r * ((ids // (r + 1)) % r)
    fold = sp.csr_matrix((np.ones(len(ids)), (ids, wrapped)), shape=(len(ids), r * r))
    areas, grads, bc = p1_geometry(points, cells)
    return PeriodicCellMesh(r, motif, points, cells, fluid, fold, areas, grads, bc)


@dataclass
class CellProblemResult:
    mesh: PeriodicCellMesh
    kind: str  # "dirichlet" or "neumann"
    w: np.ndarray  # (r^2,) or (2, r^2)
    alpha: float
    porosity: float
    A_star: np.ndarray | None = None
    b_star: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def values_at(self, n: int, eps: float) -> np.ndarray:
        """Corrector ``w(x / eps)`` at the nodes of the global ``n`` lattice.

        Requires the lattice to have exactly ``r`` cells per period.
        """
        r = self.mesh.r
        if not math.isclose(n * eps, r, rel_tol=0, abs_tol=1e-9):
            raise ValueError(f"lattice n={n} does not carry {r} cells per period of eps={eps}")
        ids = np.arange((n + 1) ** 2)
        pid = (ids % (n + 1)) % r + r * ((ids // (n + 1)) % r)
        return self.w[..., pid]


def _fluid_connected(mesh: PeriodicCellMesh) -> bool:
    cells = mesh.periodic_cells[mesh.cell_fluid]
    if len(cells) == 0:
        return False
    a = cells[:, [0, 1, 2]].ravel()
    b = cells[:, [1, 2, 0]].ravel()
    g = sp.coo_matrix((np.ones(len(a)), (a, b)), shape=(mesh.n_periodic,) * 2)
    _, label = connected_components(g, directed=False)
    return len(np.unique(label[mesh.fluid_nodes])) == 1


def solve_dirichlet_cell(alpha: float, b, motif: Motif, resolution: int = 32) -> CellProblemResult:
    """Periodic ``-alpha lap w + b.grad w = 1`` in the fluid, ``w = 0`` on the motif.

    ``b`` is given in cell coordinates. An empty motif has no Dirichlet
    constraint and is rejected.
    """
    if motif.is_empty:
        raise ValueError("the Dirichlet cell problem needs a nonempty motif "
                         "(without perforations it is singular up to constants)")
    if not motif.strictly_interior():
        raise ValueError("the Dirichlet cell problem assumes a motif strictly inside the cell")
    b = as_field(b)
    mesh = build_cell_mesh(motif, resolution)
    if not b.is_constant:
        bary = mesh.barycenters[mesh.cell_fluid]
        if len(bary) and np.max(b.divergence(bary)) > 1e-8:
            raise ValueError("div b must be <= 0 in the fluid part of the cell")
    A = assemble_form(mesh, alpha, None, "diffusion")
    if not b.is_zero:
        A = A + assemble_form(mesh, alpha, b, "advection")
    A = mesh.fold_matrix(A)
    rhs = mesh.fold.T @ constant_load(mesh)
    free = np.flatnonzero(mesh.fluid_nodes & ~mesh.solid_nodes)
    w = np.zeros(mesh.n_periodic)
    w[free] = solve_sparse(A[free][:, free], rhs[free])
    area = mesh.areas[mesh.cell_fluid]
    mean = float((w[mesh.periodic_cells[mesh.cell_fluid]].mean(axis=1) * area).sum())
    return CellProblemResult(mesh, "dirichlet", w, float(alpha), mesh.porosity,
                             meta={"resolution": resolution, "max": float(w.max()), "mean": mean,
                                   "b": b.descriptor()})


def _neumann_system(mesh: PeriodicCellMesh):
    """Folded Laplacian on fluid nodes, bordered with the mean-value row."""
    if not _fluid_connected(mesh):
        raise ValueError("fluid part of the cell is empty or not connected")
    K = mesh.fold_matrix(assemble_form(mesh, 1.0, None, "diffusion"))
    mass = mesh.fold.T @ constant_load(mesh)
    free = np.flatnonzero(mesh.fluid_nodes)
    Kf = K[free][:, free]
    m = mass[free][:, None]
    bordered = sp.bmat([[Kf, sp.csr_matrix(m)], [sp.csr_matrix(m.T), None]], format="csc")
    return free, bordered


def _rhs_from_cellwise(mesh: PeriodicCellMesh, vec: np.ndarray) -> np.ndarray:
    """``int vec . grad v`` for every periodic hat function ``v``; ``vec`` per cell."""
    local = np.einsum("ck,cik->ci", vec, mesh.grads) * mesh.areas[:, None]
    local[~mesh.cell_fluid] = 0.0
    out = np.zeros(mesh.n_periodic)
    np.add.at(out, mesh.periodic_cells.ravel(), local.ravel())
    return out


def _solve_bordered(free, bordered, rhs_full: np.ndarray, n: int) -> np.ndarray:
    rhs = np.concatenate([rhs_full[free], [0.0]])
    sol = solve_sparse(bordered, rhs)
    out = np.zeros(n)
    out[free] = sol[:-1]
    return out


def solve_neumann_correctors(alpha: float, motif: Motif, resolution: int = 32) -> CellProblemResult:
    """Zero-mean periodic ``w_i`` with ``-lap w_i = 0`` and ``(grad w_i + e_i).n = 0`` on the motif."""
    mesh = build_cell_mesh(motif, resolution)
    free, bordered = _neumann_system(mesh)
    ncell = len(mesh.cells)
    w = np.zeros((2, mesh.n_periodic))
    for i in range(2):
        e = np.zeros((ncell, 2))
        e[:, i] = 1.0
        w[i] = _solve_bordered(free, bordered, -_rhs_from_cellwise(mesh, e), mesh.n_periodic)
    res = CellProblemResult(mesh, "neumann", w, float(alpha), mesh.porosity,
                            meta={"resolution": resolution})
    res.A_star, _ = effective_tensors(res, alpha, None)
    return res


def effective_tensors(correctors: CellProblemResult, alpha: float, b=None):
    """``A*`` (columns ``A* e_i``) and ``b*`` from the Neumann correctors.

    ``b`` is evaluated in cell coordinates at fine-cell barycenters; ``None``
    returns ``b* = None``.
    """
    if correctors.kind != "neumann":
        raise ValueError("effective tensors need Neumann correctors")
    mesh = correctors.mesh
    if correctors.w.shape != (2, mesh.n_periodic):
        raise ValueError("corrector fields do not match the cell mesh")
    fl = mesh.cell_fluid
    area = mesh.areas[fl]
    A = np.empty((2, 2))
    flux = []
    for i in range(2):
        g = mesh.cell_gradients(correctors.w[i])[fl]
        g[:, i] += 1.0
        flux.append(g)
        A[:, i] = alpha * (g * area[:, None]).sum(axis=0)
    if b is None:
        return A, None
    bv = as_field(b)(mesh.barycenters[fl])
    bstar = np.array([((bv * flux[i]).sum(axis=1) * area).sum() for i in range(2)])
    return A, bstar


def decompose_drift(b, motif: Motif, resolution: int = 32):
    """Split ``b = grad(phi_per) + B_per`` with ``B_per`` weakly divergence free.

    ``phi_per`` is periodic with zero mean over the fluid. Returns
    ``(phi_per, B_per, mesh, residual)``; ``B_per`` is given per fine cell and
    ``residual`` is the largest ``|int B_per . grad v|`` over hat functions.
    """
    mesh = build_cell_mesh(motif, resolution)
    free, bordered = _neumann_system(mesh)
    bv = as_field(b)(mesh.barycenters)
    phi = _solve_bordered(free, bordered, _rhs_from_cellwise(mesh, bv), mesh.n_periodic)
    B = bv - mesh.cell_gradients(phi)
    B[~mesh.cell_fluid] = 0.0
    residual = float(np.abs(_rhs_from_cellwise(mesh, B)[free]).max()) if len(free) else 0.0
    return phi, B, mesh, residual


def b_star_from_cellwise(correctors: CellProblemResult, B: np.ndarray) -> np.ndarray:
    """``b*`` computed from a per-cell drift such as ``B_per``."""
    mesh = correctors.mesh
    fl = mesh.cell_fluid
    area = mesh.areas[fl]
    out = np.empty(2)
    for i in range(2):
        g = mesh.cell_gradients(correctors.w[i])[fl]
        g[:, i] += 1.0
        out[i] = ((B[fl] * g).sum(axis=1) * area).sum()
    return out


@dataclass
class HomogenizedSolution:
    grid: object
    u: np.ndarray

    def dg_field(self) -> np.ndarray:
        return self.u[self.grid.cells]


def solve_homogenized(A_star, b_star, porosity: float, f, n: int) -> HomogenizedSolution:
    """P1 solve of ``-div(A* grad u) + b*.grad u = porosity * f`` on the unit square."""
    A_star = np.asarray(A_star, dtype=float)
    grid = build_fine_grid(n, None)
    A = assemble_form(grid, A_star, None, "diffusion")
    b_star = np.zeros(2) if b_star is None else np.asarray(b_star, dtype=float)
    if np.any(b_star):
        A = A + assemble_form(grid, 1.0, b_star, "advection")
    M = assemble_form(grid, 1.0, None, "mass")
    if callable(f):
        fn = f(grid.points[:, 0], grid.points[:, 1]) * np.ones(grid.n_nodes)
    else:
        fn = np.full(grid.n_nodes, float(f))
    rhs = porosity * (M @ fn)
    interior = np.setdiff1d(np.arange(grid.n_nodes), grid.boundary_nodes)
    u = np.zeros(grid.n_nodes)
    u[interior] = solve_sparse(A.tocsr()[interior][:, interior], rhs[interior])
    return HomogenizedSolution(grid, u)


# ---------------------------------------------------------------------------
# rate studies


def _fit_rate(eps, err) -> float:
    x, y = np.log(np.asarray(eps)), np.log(np.asarray(err))
    return float(np.polyfit(x, y, 1)[0])


def _check_eps(eps_list, r):
    out = []
    for eps in eps_list:
        k = 1.0 / eps
        if abs(k - round(k)) > 1e-9:
            raise ValueError(f"1/eps must be an integer, got eps={eps}")
        out.append((float(eps), int(round(k)) * r))
    return out


@dataclass
class RateTable:
    eps: list
    errors: list
    baseline: list  # comparison column (|u_eps| or the plain error)
    rate: float
    meta: dict = field(default_factory=dict)

    @property
    def strictly_decreasing(self) -> bool:
        order = np.argsort(self.eps)[::-1]
        e = np.asarray(self.errors)[order]
        return bool(np.all(np.diff(e) < 0))


def rate_study_dirichlet(alpha: float, b, motif: Motif, f, eps_list, cells_per_period: int = 16) -> RateTable:
    """``|u_eps - eps^2 w(x/eps) f|_{H1}`` over the fluid for ``b_hat = b(x/eps)/eps``.

    The reference lattice has exactly ``cells_per_period`` cells per period
    so the corrector is read off node by node.
    """
    cell = solve_dirichlet_cell(alpha, b, motif, cells_per_period)
    errors, norms, res = [], [], []
    for eps, n in _check_eps(eps_list, cells_per_period):
        bhat = as_field(b).rescaled(1.0 / eps, eps)
        spec = DomainSpec(eps, Periodic(motif), "dirichlet")
        ref = solve_reference(spec, alpha, bhat, f, n)
        pts = ref.grid.points
        fn = f(pts[:, 0], pts[:, 1]) * np.ones(len(pts)) if callable(f) else np.full(len(pts), float(f))
        approx = eps ** 2 * cell.values_at(n, eps) * fn
        fluid = ref.grid.cell_fluid
        diff = (ref.u - approx)[ref.grid.cells]
        errors.append(float(math.sqrt(cell_h1_squared(diff)[fluid].sum())))
        norms.append(float(math.sqrt(cell_h1_squared(ref.dg_field())[fluid].sum())))
        res.append(ref.n)
    return RateTable(list(eps_list), errors, norms, _fit_rate(eps_list, errors),
                     {"resolutions": res, "cells_per_period": cells_per_period,
                      "note": "square motifs have corners; theory gives 3/2 for smooth holes"})


def rate_study_neumann(alpha: float, motif: Motif, f, eps_list, b=(1.0, 1.0),
                       cells_per_period: int = 16) -> RateTable:
    """``||u_eps - u* - eps sum_i w_i(x/eps) d_i u*||_{H1}`` for ``b_hat = b(x/eps)``.

    ``u*`` is solved on the same lattice as ``u_eps``; the expansion is
    formed cell by cell with the constant gradient of ``u*``.
    """
    corr = solve_neumann_correctors(alpha, motif, cells_per_period)
    bcell = as_field(b)
    A_star, b_star = effective_tensors(corr, alpha, bcell)
    errors, plain, res = [], [], []
    for eps, n in _check_eps(eps_list, cells_per_period):
        bhat = bcell.rescaled(1.0, eps)
        spec = DomainSpec(eps, Periodic(motif), "neumann")
        ref = solve_reference(spec, alpha, bhat, f, n)
        hom = solve_homogenized(A_star, b_star, corr.porosity, f, n)
        grid = ref.grid
        ustar = hom.dg_field()
        grad = np.einsum("ci,cik->ck", ustar, _lattice_grads(n))
        w = corr.values_at(n, eps)[:, grid.cells]  # (2, cells, 3)
        expansion = ustar + eps * (w[0] * grad[:, [0]] + w[1] * grad[:, [1]])
        fluid = grid.cell_fluid
        d1 = ref.dg_field() - expansion
        d0 = ref.dg_field() - ustar
        errors.append(float(math.sqrt((cell_h1_squared(d1) + _l2_squared(d1))[fluid].sum())))
        plain.append(float(math.sqrt((cell_h1_squared(d0) + _l2_squared(d0))[fluid].sum())))
        res.append(n)
    rate = _fit_rate(eps_list, errors) if all(e > 0 for e in errors) else float("nan")
    return RateTable(list(eps_list), errors, plain, rate,
                     {"resolutions": res, "A_star": A_star.tolist(), "b_star": b_star.tolist(),
                      "porosity": corr.porosity, "cells_per_period": cells_per_period})


def _lattice_grads(n: int) -> np.ndarray:
    i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="xy")
    pts = np.stack([i.ravel() / n, j.ravel() / n], axis=1)
    return p1_geometry(pts, lattice_cells(n))[1]
