"""Fine-scale P1 Galerkin reference solutions on the global lattice."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fem import as_field, assemble_form, solve_sparse
from .geometry import DomainSpec
from .mesh import FineGrid, build_fine_grid


class ResolutionError(ValueError):
    """The fine mesh is too coarse for a plain Galerkin solve."""

    def __init__(self, message: str, required_n: int):
        super().__init__(message)
        self.required_n = required_n


@dataclass
class ReferenceSolution:
    grid: FineGrid
    u: np.ndarray
    alpha: float
    b_descriptor: str
    perforation_bc: str
    residual: float = 0.0

    @property
    def n(self) -> int:
        return self.grid.n

    def dg_field(self) -> np.ndarray:
        return self.u[self.grid.cells]


def mesh_peclet(alpha: float, b, n: int) -> float:
    return as_field(b).sup_norm() / n / (2.0 * alpha)


def required_resolution(alpha: float, b, multiple: int = 1) -> int:
    """Smallest multiple of ``multiple`` with mesh Peclet number <= 1."""
    bmax = as_field(b).sup_norm()
    n = max(1, math.ceil(bmax / (2.0 * alpha) - 1e-12))
    return multiple * math.ceil(n / multiple)


def solve_reference(spec: DomainSpec | None, alpha: float, b, f, n: int,
                    enforce_peclet: bool = True) -> ReferenceSolution:
    """Galerkin solve of ``-alpha lap u + b.grad u = f`` on the fluid part of the lattice.

    Dirichlet perforations pin every node of a solid cell to zero; Neumann
    perforations just drop solid cells. ``u = 0`` on the outer boundary.
    """
    b = as_field(b)
    pe = mesh_peclet(alpha, b, n)
    if enforce_peclet and pe > 1.0 + 1e-12:
        need = required_resolution(alpha, b)
        raise ResolutionError(f"mesh Peclet number {pe:.3g} > 1 at n={n}; need n >= {need}", need)
    grid = build_fine_grid(n, spec)
    A = (assemble_form(grid, alpha, None, "diffusion") + assemble_form(grid, alpha, b, "advection")).tocsr()
    M = assemble_form(grid, 1.0, None, "mass")
    fn = f(grid.points[:, 0], grid.points[:, 1]) * np.ones(grid.n_nodes) if callable(f) else np.full(grid.n_nodes, float(f))
    rhs = M @ fn
    fixed = np.zeros(grid.n_nodes, dtype=bool)
    fixed[grid.boundary_nodes] = True
    bc = spec.perforation_bc if spec is not None else "dirichlet"
    if bc == "dirichlet":
        fixed |= grid.node_solid
    else:
        touches = np.zeros(grid.n_nodes, dtype=bool)
        touches[grid.cells[grid.cell_fluid].ravel()] = True
        fixed |= ~touches
    free = np.flatnonzero(~fixed)
    u = np.zeros(grid.n_nodes)
    if len(free):
        Aff = A[free][:, free]
        u[free] = solve_sparse(Aff, rhs[free])
        res = float(np.linalg.norm(Aff @ u[free] - rhs[free]))
    else:
        res = 0.0
    return ReferenceSolution(grid, u, float(alpha), b.descriptor(), bc, res)
