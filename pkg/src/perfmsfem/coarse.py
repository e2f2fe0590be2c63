"""Global coarse problem over the multiscale space.

Degrees of freedom are the inner coarse edges (CR family) or inner coarse
vertices (nodal families), followed by one bubble per element when bubbles
are used. Every matrix entry is a broken integral of two basis functions
over the fluid fine cells of one element.
"""

from __future__ import annotations

import logging
import re
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .basis import BasisConfig, LocalBasis, compute_local_basis
from .fem import SparseSystem, as_field, load_vector, operator_matrix, solve_sparse
from .geometry import DomainSpec
from .mesh import CoarseMesh, FineElementMesh, build_fine_mesh

log = logging.getLogger(__name__)

_BASE_METHODS = {
    "MsFEM": ("diffusion", "none"),
    "MsFEM+B": ("diffusion", "diffusion_bubble"),
    "MsFEM+advB": ("diffusion", "advdiff_bubble"),
    "AdvMsFEM": ("advdiff", "none"),
    "AdvMsFEM+B": ("advdiff", "diffusion_bubble"),
    "AdvMsFEM+advB": ("advdiff", "advdiff_bubble"),
}


class MethodError(ValueError):
    """Invalid method name or basis/method mismatch."""


@dataclass(frozen=True)
class MethodSpec:
    name: str
    basis: BasisConfig
    global_form: str = "c_H"
    stabilized: bool = False

    @property
    def stab_void(self) -> bool:
        """Stabilization of a bubble-free space built with the full operator vanishes."""
        return self.stabilized and self.basis.operator == "advdiff" and self.basis.bubbles == "none"


def parse_method(name: str, perforation_bc: str = "dirichlet") -> MethodSpec:
    """Parse names like ``MsFEM+advB``, ``Stab(MsFEM)`` or ``AdvMsFEM+advB[aH]``.

    Bracketed options: ``aH`` (global form a_H with a_flux bases), ``lin``
    (linear boundary data), ``OS`` / ``OS<r>`` (oversampling, default ratio 3),
    ``weak`` (weak zero-average condition on outer edges).
    """
    raw = name.strip()
    m = re.fullmatch(r"(Stab\()?([A-Za-z+]+)(\))?(?:\[([A-Za-z0-9,]*)\])?", raw)
    if not m or bool(m.group(1)) != bool(m.group(3)):
        raise MethodError(f"cannot parse method name {name!r}")
    base = m.group(2)
    if base not in _BASE_METHODS:
        raise MethodError(f"unknown method {base!r}; expected one of {sorted(_BASE_METHODS)}")
    operator, bubbles = _BASE_METHODS[base]
    opts = [o for o in (m.group(4) or "").split(",") if o]
    family, ratio, exterior, use_a = "crouzeix_raviart", 3, "pointwise", False
    for o in opts:
        if o == "aH":
            use_a = True
        elif o == "lin":
            family = "linear"
        elif o.startswith("OS"):
            family = "oversampling"
            ratio = int(o[2:]) if len(o) > 2 else 3
        elif o == "weak":
            exterior = "weak"
        else:
            raise MethodError(f"unknown method option {o!r} in {name!r}")
    if perforation_bc == "neumann":
        use_a = True
    flux = "a_flux" if use_a else "c_flux"
    cfg = BasisConfig(operator=operator, bc_family=family, flux_form=flux, bubbles=bubbles,
                      perforation_bc=perforation_bc, ratio=ratio, exterior_bc=exterior)
    return MethodSpec(raw, cfg, "a_H" if use_a else "c_H", bool(m.group(1)))


def tau_K(bnorm, H: float, alpha: float):
    """Stabilization parameter ``H/(2|b|) (coth(x) - 1/x)`` with ``x = |b| H / (2 alpha)``.

    Vectorized over ``bnorm``. Small ``x`` uses the Taylor series of
    ``coth(x) - 1/x`` so the limit ``H^2 / (12 alpha)`` at ``|b| = 0`` is exact.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if not H > 0:
        raise ValueError("H must be positive")
    bnorm = np.abs(np.asarray(bnorm, dtype=float))
    x = bnorm * H / (2.0 * alpha)
    out = np.empty_like(x)
    small = x < 0.1
    xs = x[small]
    x2 = xs * xs
    # (coth x - 1/x) / x
    series = 1 / 3 - x2 / 45 + 2 * x2**2 / 945 - x2**3 / 4725 + 2 * x2**4 / 93555
    out[small] = H * H / (4.0 * alpha) * series
    xl = x[~small]
    coth = np.where(xl > 20.0, 1.0, 1.0 / np.tanh(np.minimum(xl, 20.0)))
    out[~small] = H / (2.0 * bnorm[~small]) * (coth - 1.0 / xl)
    return out if out.ndim else float(out)


@dataclass
class ElementData:
    mesh: FineElementMesh
    basis: LocalBasis


@dataclass
class DofMap:
    n_primary: int  # inner edges or inner vertices
    primary_of: dict  # global edge/vertex id -> dof
    n_bubbles: int
    family: str

    @property
    def size(self) -> int:
        return self.n_primary + self.n_bubbles


def build_dofmap(coarse: CoarseMesh, family: str, with_bubbles: bool) -> DofMap:
    ids = coarse.interior_edges if family == "crouzeix_raviart" else coarse.interior_vertices
    return DofMap(len(ids), {int(e): k for k, e in enumerate(ids)},
                  coarse.n_triangles if with_bubbles else 0, family)


def element_dofs(basis: LocalBasis, dofmap: DofMap):
    """Global DOF per local function (or -1), local function stack and builder tags."""
    rows, funcs, tags = [], [], []
    for k, gid in enumerate(basis.dof_ids):
        dof = dofmap.primary_of.get(int(gid), -1)
        if dof < 0:
            continue
        rows.append(dof if basis.active[k] else -1)
        funcs.append(basis.functions[k])
        tags.append((0.0, 1.0 if basis.edge_operator == "diffusion" else 0.0))
    if dofmap.n_bubbles and basis.bubble is not None:
        rows.append(dofmap.n_primary + basis.parent if np.any(basis.bubble) else -1)
        funcs.append(basis.bubble)
        tags.append((1.0, 1.0 if basis.bubble_operator == "diffusion" else 0.0))
    if not funcs:
        return np.zeros(0, dtype=np.int64), np.zeros((0, basis.n_nodes)), np.zeros((0, 2))
    return np.array(rows, dtype=np.int64), np.array(funcs), np.array(tags)


def _f_nodes(f, pts):
    if callable(f):
        return np.asarray(f(pts[:, 0], pts[:, 1]), dtype=float) * np.ones(len(pts))
    return np.full(len(pts), float(f))


def assemble_coarse(spec: DomainSpec, coarse: CoarseMesh, elements: list[ElementData],
                    method: MethodSpec, f, alpha: float, b, include_stab: bool | None = None
                    ) -> tuple[SparseSystem, DofMap, np.ndarray]:
    """Assemble the coarse system; returns (system, dofmap, active-dof mask).

    Inactive DOFs (degenerate edges, fully perforated elements) get identity
    rows and a zero right-hand side.
    """
    cfg = method.basis.resolved(spec)
    with_bubbles = cfg.bubbles != "none"
    dofmap = build_dofmap(coarse, cfg.bc_family, with_bubbles)
    kind = "c" if method.global_form == "c_H" else "a"
    if spec.perforation_bc == "neumann" and kind == "c":
        raise MethodError("Neumann perforations require the a_H global form")
    b = as_field(b)
    stab = method.stabilized and not method.stab_void if include_stab is None else include_stab
    rows, cols, vals = [], [], []
    rhs = np.zeros(dofmap.size)
    touched = np.zeros(dofmap.size, dtype=bool)
    for el in elements:
        basis, mesh = el.basis, el.mesh
        if basis.config_key != cfg.key():
            raise MethodError(f"element {basis.parent}: basis built for {basis.config_key!r}, "
                              f"method needs {cfg.key()!r}")
        dofs, Phi, tags = element_dofs(basis, dofmap)
        if len(dofs) == 0:
            continue
        E = operator_matrix(mesh, alpha, b, kind)
        # E[i, j] is the form with trial j and test i, so local[p, q] tests with phi_p
        local = Phi @ (E @ Phi.T)
        fn = _f_nodes(f, mesh.points)
        load = Phi @ load_vector(mesh, fn)
        if stab:
            a_st, f_st = _stab_terms(mesh, Phi, tags, alpha, b, coarse.H, f)
            local = local + a_st
            load = load + f_st
        ok = dofs >= 0
        d = dofs[ok]
        touched[d] = True
        L = local[np.ix_(ok, ok)]
        rows.append(np.repeat(d, len(d)))
        cols.append(np.tile(d, len(d)))
        vals.append(L.ravel())
        np.add.at(rhs, d, load[ok])
    active = touched
    idle = np.flatnonzero(~active)
    rows.append(idle)
    cols.append(idle)
    vals.append(np.ones(len(idle)))
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(dofmap.size, dofmap.size)).tocsr()
    rhs[idle] = 0.0
    return SparseSystem(A, rhs).finalize(), dofmap, active


def _stab_terms(mesh, Phi, tags, alpha, b, H, f):
    """Per-element stabilization matrix and load.

    With ``G_p = b . grad(phi_p)`` on each fluid cell, the residual of a basis
    function under the full operator is ``R_q = s_q + d_q G_q`` where ``s_q``
    is its unit source (1 for bubbles) and ``d_q`` is 1 when it was built
    with the diffusion operator only.
    """
    fl = mesh.cell_fluid
    bary = mesh.barycenters[fl]
    bv = b(bary)
    grads = np.einsum("pci,cik->pck", Phi[:, mesh.cells[fl]], mesh.grads[fl])  # (k, c, 2)
    G = np.einsum("ck,pck->pc", bv, grads)
    tau = tau_K(np.hypot(bv[:, 0], bv[:, 1]), H, alpha)
    w = tau * mesh.areas[fl]
    R = tags[:, 0][:, None] + tags[:, 1][:, None] * G
    a_st = (G * w) @ R.T
    fb = _f_nodes(f, bary)
    f_st = (G * w) @ fb
    return a_st, f_st


@dataclass
class CoarseSolution:
    method: MethodSpec
    coarse: CoarseMesh
    dofmap: DofMap
    coefficients: np.ndarray
    active: np.ndarray
    elements: list[ElementData] = field(repr=False)
    diagnostics: dict = field(default_factory=dict)

    def element_field(self, t: int) -> np.ndarray:
        """Nodal values of u_H on the fine mesh of element ``t``."""
        el = self.elements[t]
        dofs, Phi, _ = element_dofs(el.basis, self.dofmap)
        ok = dofs >= 0
        if not ok.any():
            return np.zeros(el.mesh.n_nodes)
        return self.coefficients[dofs[ok]] @ Phi[ok]

    def dg_field(self) -> np.ndarray:
        """Broken field as (n_lattice_cells, 3) vertex values in lattice-cell order."""
        n = self.elements[0].mesh.n
        out = np.zeros((2 * n * n, 3))
        for t, el in enumerate(self.elements):
            u = self.element_field(t)
            out[el.mesh.cell_gid] = _lattice_order(el.mesh, u)
        return out


def _lattice_order(mesh: FineElementMesh, u: np.ndarray) -> np.ndarray:
    """Cell-vertex values ordered like ``lattice_cells`` (meshes keep that order already)."""
    return u[mesh.cells]


def build_elements(coarse: CoarseMesh, spec: DomainSpec, alpha, b, cfg: BasisConfig, m: int,
                   bases: dict | None = None) -> list[ElementData]:
    out = []
    for t in range(coarse.n_triangles):
        mesh = build_fine_mesh(coarse, t, spec, m)
        basis = bases[t] if bases is not None else compute_local_basis(coarse, t, spec, alpha, b, cfg, m, mesh)
        out.append(ElementData(mesh, basis))
    return out


def solve_msfem(spec: DomainSpec, coarse: CoarseMesh, method: MethodSpec, f, alpha: float, b,
                m: int, elements: list[ElementData] | None = None) -> CoarseSolution:
    """Compute (or reuse) element bases, assemble, solve and attach the expansion."""
    cfg = method.basis.resolved(spec)
    t0 = time.perf_counter()
    if elements is None:
        elements = build_elements(coarse, spec, alpha, b, cfg, m)
    t1 = time.perf_counter()
    system, dofmap, active = assemble_coarse(spec, coarse, elements, method, f, alpha, b)
    try:
        coef = solve_sparse(system, symmetry_hint="general")
    except Exception as exc:
        raise type(exc)(f"[{method.name}] {exc}") from exc
    coef[~active] = 0.0
    t2 = time.perf_counter()
    res = float(np.linalg.norm(system.matrix @ coef - system.rhs))
    diag = {"n_dofs": int(active.sum()), "n_total": dofmap.size, "residual": res,
            "offline_s": t1 - t0, "online_s": t2 - t1}
    return CoarseSolution(method, coarse, dofmap, coef, active, elements, diag)
