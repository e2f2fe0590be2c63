"""P1 assembly primitives and the sparse solving contract.

Meshes are duck-typed: anything with ``points`` (n, 2), ``cells`` (m, 3) and
``cell_fluid`` (m,) works. Forms are integrated over fluid cells only.
Advection fields are sampled once per cell at the barycenter, which is exact
for constant fields.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

FORMS = ("diffusion", "advection", "skew_advection_c", "divergence_term", "mass")


class SolverError(RuntimeError):
    """Raised when a sparse solve fails or misses its residual target."""


def p1_geometry(points: np.ndarray, cells: np.ndarray):
    """Areas, barycentric-coordinate gradients (m, 3, 2) and barycenters."""
    p = points[cells]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    area = 0.5 * np.abs(det)
    # Rows of the inverse Jacobian give grad(lambda_1), grad(lambda_2).
    g1 = np.stack([d2[:, 1], -d2[:, 0]], axis=1) / det[:, None]
    g2 = np.stack([-d1[:, 1], d1[:, 0]], axis=1) / det[:, None]
    grads = np.stack([-g1 - g2, g1, g2], axis=1)
    return area, grads, p.mean(axis=1)


def _geometry(mesh):
    if getattr(mesh, "areas", None) is not None and getattr(mesh, "grads", None) is not None:
        return mesh.areas, mesh.grads, mesh.barycenters
    return p1_geometry(mesh.points, mesh.cells)


class AdvectionField:
    """Velocity field ``scale * b(x / period)``.

    ``b`` is either a constant 2-vector or a callable mapping an (m, 2) array of
    points to (m, 2) velocities. The divergence of a callable field is taken
    by centred differences.
    """

    def __init__(self, b, scale: float = 1.0, period: float = 1.0, label: str | None = None):
        if callable(b):
            self._const = None
            self._fn = b
        else:
            self._const = np.asarray(b, dtype=float).reshape(2)
            self._fn = None
        self.scale = float(scale)
        self.period = float(period)
        self.label = label

    @classmethod
    def zero(cls) -> "AdvectionField":
        return cls((0.0, 0.0), label="zero")

    @classmethod
    def constant(cls, vec, scale: float = 1.0) -> "AdvectionField":
        return cls(vec, scale=scale)

    def rescaled(self, scale: float = 1.0, period: float = 1.0) -> "AdvectionField":
        """``scale * self(x / period)`` as a new field."""
        base = self._fn if self._fn is not None else self._const
        return AdvectionField(base, self.scale * scale, self.period * period, self.label)

    @property
    def is_constant(self) -> bool:
        return self._const is not None

    @property
    def is_zero(self) -> bool:
        return self.is_constant and not np.any(self._const * self.scale)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self._const is not None:
            return np.broadcast_to(self.scale * self._const, x.shape).copy()
        return self.scale * np.asarray(self._fn(x / self.period), dtype=float)

    def divergence(self, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self._const is not None:
            return np.zeros(len(x))
        ex = np.array([step, 0.0])
        ey = np.array([0.0, step])
        return ((self(x + ex)[:, 0] - self(x - ex)[:, 0])
                + (self(x + ey)[:, 1] - self(x - ey)[:, 1])) / (2 * step)

    def sup_norm(self, samples: int = 257) -> float:
        """Max Euclidean magnitude over the unit square."""
        if self._const is not None:
            return float(np.linalg.norm(self.scale * self._const))
        s = np.linspace(0.0, 1.0, samples)
        X, Y = np.meshgrid(s, s)
        v = self(np.stack([X.ravel(), Y.ravel()], axis=1))
        return float(np.max(np.hypot(v[:, 0], v[:, 1])))

    def descriptor(self) -> str:
        if self.label:
            core = self.label
        elif self._const is not None:
            core = "const(%.17g,%.17g)" % tuple(self._const)
        else:
            core = "fn:" + getattr(self._fn, "__qualname__", repr(self._fn))
        return "%s*scale=%.17g/period=%.17g" % (core, self.scale, self.period)


def as_field(b) -> AdvectionField:
    if b is None:
        return AdvectionField.zero()
    if isinstance(b, AdvectionField):
        return b
    return AdvectionField(b)


def _triplets(cells, local):
    rows = np.repeat(cells, 3, axis=1).ravel()
    cols = np.tile(cells, (1, 3)).ravel()
    return rows, cols, local.reshape(-1)


def assemble_form(mesh, alpha, b_field=None, form: str = "diffusion",
                  cell_mask: np.ndarray | None = None, n_nodes: int | None = None) -> sp.csr_matrix:
    """Assemble one bilinear form over the fluid cells of ``mesh``.

    Entry ``[i, j]`` is the form evaluated with trial function ``j`` and test
    function ``i``. ``alpha`` may be a positive scalar or a 2x2 tensor (used
    only by the diffusion form).
    """
    if form not in FORMS:
        raise ValueError(f"unknown form {form!r}")
    alpha_arr = np.asarray(alpha, dtype=float)
    if alpha_arr.ndim == 0:
        if not alpha_arr > 0:
            raise ValueError("alpha must be positive")
    elif alpha_arr.shape != (2, 2) or np.any(np.linalg.eigvalsh(0.5 * (alpha_arr + alpha_arr.T)) <= 0):
        raise ValueError("alpha tensor must be 2x2 with positive-definite symmetric part")
    area, grads, bary = _geometry(mesh)
    mask = np.asarray(mesh.cell_fluid, dtype=bool)
    if cell_mask is not None:
        mask = mask & cell_mask
    cells = mesh.cells[mask]
    area, grads, bary = area[mask], grads[mask], bary[mask]
    n = n_nodes if n_nodes is not None else len(mesh.points)

    if form == "diffusion":
        if alpha_arr.ndim == 0:
            local = float(alpha_arr) * np.einsum("cik,cjk->cij", grads, grads)
        else:
            local = np.einsum("cjl,kl,cik->cij", grads, alpha_arr, grads)
        local *= area[:, None, None]
    elif form == "mass":
        local = np.broadcast_to(np.array([[2.0, 1, 1], [1, 2, 1], [1, 1, 2]]) / 12.0,
                                (len(area), 3, 3)) * area[:, None, None]
    else:
        field = as_field(b_field)
        bvals = field(bary) if len(bary) else np.zeros((0, 2))
        if form == "divergence_term":
            div = field.divergence(bary) if len(bary) else np.zeros(0)
            mass = np.array([[2.0, 1, 1], [1, 2, 1], [1, 1, 2]]) / 12.0
            local = -0.5 * (div * area)[:, None, None] * mass[None]
        else:
            bg = np.einsum("ck,cjk->cj", bvals, grads)  # b . grad(phi_j)
            adv = (area / 3.0)[:, None, None] * np.broadcast_to(bg[:, None, :], (len(area), 3, 3))
            if form == "advection":
                local = adv
            else:
                local = 0.5 * (adv - adv.transpose(0, 2, 1))
    rows, cols, vals = _triplets(cells, np.ascontiguousarray(local))
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    mat.sum_duplicates()
    return mat


def operator_matrix(mesh, alpha, b_field, kind: str) -> sp.csr_matrix:
    """Element bilinear forms used by the methods.

    ``kind``: 'diffusion' (alpha grad.grad), 'a' (diffusion + advection) or
    'c' (diffusion + skew advection + divergence term).
    """
    A = assemble_form(mesh, alpha, None, "diffusion")
    field = as_field(b_field)
    if kind == "diffusion" or field.is_zero:
        return A
    if kind == "a":
        return (A + assemble_form(mesh, alpha, field, "advection")).tocsr()
    if kind == "c":
        A = A + assemble_form(mesh, alpha, field, "skew_advection_c")
        if not field.is_constant:
            A = A + assemble_form(mesh, alpha, field, "divergence_term")
        return A.tocsr()
    raise ValueError(f"unknown operator kind {kind!r}")


def load_vector(mesh, f_nodes: np.ndarray) -> np.ndarray:
    """``int f v`` with f replaced by its P1 interpolant, over fluid cells."""
    M = assemble_form(mesh, 1.0, None, "mass")
    return M @ f_nodes


def constant_load(mesh) -> np.ndarray:
    """``int 1 * v`` over fluid cells."""
    area, _, _ = _geometry(mesh)
    mask = np.asarray(mesh.cell_fluid, dtype=bool)
    out = np.zeros(len(mesh.points))
    np.add.at(out, mesh.cells[mask].ravel(), np.repeat(area[mask] / 3.0, 3))
    return out


def edge_average_functional(mesh, trace, mode: str = "dirichlet") -> np.ndarray:
    """Dense row ``r`` with ``r @ v = int_E v`` for a P1 field ``v``.

    ``mode='dirichlet'`` integrates over the whole edge; ``'neumann'`` only
    over segments whose adjacent cell in this element is fluid. Returns the
    zero row for a fully perforated edge.
    """
    row = np.zeros(len(mesh.points))
    half = 0.5 * trace.segment_length
    a, b = trace.nodes[:-1], trace.nodes[1:]
    if mode == "dirichlet":
        active = np.ones(len(a), dtype=bool)
        # solid trace nodes carry 0 in this mode; drop them explicitly
        keep_node = ~mesh.node_solid
    elif mode == "neumann":
        if trace.segment_fluid is not None:
            active = trace.segment_fluid
        else:
            active = np.asarray(mesh.cell_fluid)[trace.segment_cells]
        keep_node = np.ones(len(mesh.points), dtype=bool)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    np.add.at(row, a[active], half)
    np.add.at(row, b[active], half)
    row[~keep_node] = 0.0
    return row


@dataclass
class SparseSystem:
    """Square sparse system; ``matrix`` is CSR after finalization."""

    matrix: sp.csr_matrix
    rhs: np.ndarray

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def finalize(self) -> "SparseSystem":
        self.matrix = sp.csr_matrix(self.matrix)
        self.matrix.sum_duplicates()
        self.matrix.sort_indices()
        return self

    @property
    def csr_triplets(self):
        m = self.matrix
        return m.indptr, m.indices, m.data


DIRECT_LIMIT = 4_000_000


def solve_sparse(system, b=None, symmetry_hint: str = "general", rtol: float = 1e-10) -> np.ndarray:
    """Solve ``A x = b``; direct LU below ``DIRECT_LIMIT`` unknowns, ILU-Krylov above.

    ``system`` is a :class:`SparseSystem` or a matrix (then ``b`` is required).
    Raises :class:`SolverError` when the result misses
    ``||Ax - b|| <= rtol * (||b|| + ||A||_F ||x||)``.
    """
    if isinstance(system, SparseSystem):
        A, b = system.matrix, system.rhs if b is None else b
    else:
        A = system
    if b is None:
        raise ValueError("right-hand side missing")
    if symmetry_hint not in ("spd", "general"):
        raise ValueError("symmetry_hint must be 'spd' or 'general'")
    A = sp.csc_matrix(A)
    b = np.asarray(b, dtype=float)
    n = A.shape[0]
    if A.shape[1] != n:
        raise SolverError(f"matrix is not square: {A.shape}")
    if n == 0:
        return np.zeros((0,) + b.shape[1:])
    if n <= DIRECT_LIMIT:
        try:
            lu = spla.splu(A, permc_spec="COLAMD")
        except RuntimeError as exc:
            raise SolverError(f"sparse LU failed on {n} unknowns: {exc}") from exc
        x = lu.solve(b)
    else:
        ilu = spla.spilu(A, drop_tol=1e-5, fill_factor=20)
        pre = spla.LinearOperator(A.shape, ilu.solve)
        cols = b.reshape(n, -1)
        x = np.empty_like(cols)
        for k in range(cols.shape[1]):
            solver = spla.cg if symmetry_hint == "spd" else spla.gmres
            xk, info = solver(A, cols[:, k], M=pre, rtol=rtol * 1e-2, maxiter=2000)
            if info != 0:
                raise SolverError(f"Krylov solver did not converge (info={info}) on {n} unknowns")
            x[:, k] = xk
        x = x.reshape(b.shape)
    check_residual(A, x, b, rtol)
    return x


def check_residual(A, x, b, rtol: float = 1e-10) -> float:
    r = A @ x - b
    normA = spla.norm(A) if sp.issparse(A) else np.linalg.norm(A)
    res = np.linalg.norm(r)
    bound = rtol * (np.linalg.norm(b) + normA * np.linalg.norm(x))
    if not np.all(np.isfinite(x)) or res > bound:
        raise SolverError(f"residual {res:.3e} exceeds bound {bound:.3e} (n={A.shape[0]})")
    return float(res)


def cell_gradients(mesh, values: np.ndarray) -> np.ndarray:
    """Constant gradient of a P1 field on every cell, shape (m, 2)."""
    _, grads, _ = _geometry(mesh)
    return np.einsum("ci,cik->ck", values[mesh.cells], grads)


def f_callable(f) -> Callable[[np.ndarray], np.ndarray]:
    if callable(f):
        return lambda pts: np.asarray(f(pts[:, 0], pts[:, 1]), dtype=float) * np.ones(len(pts))
    value = float(f)
    return lambda pts: np.full(len(pts), value)
