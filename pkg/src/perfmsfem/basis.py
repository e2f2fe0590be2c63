"""Element-local multiscale basis functions.

Crouzeix-Raviart edge functions and bubbles are computed from one saddle-point
system per element and operator::

    [ A_FF  -C^T ] [u]   [F]
    [ C      0   ] [l] = [g]

where ``A_FF`` is the element form on the free fine nodes, row ``E'`` of
``C`` integrates a trace over the inner edge ``E'`` and ``l`` holds the
constant edge fluxes. All edges and the bubble share one factorization.

The linear and oversampling families give nodal (vertex) functions instead
and are kept for comparison.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

from .fem import (SolverError, as_field, assemble_form, check_residual, constant_load,
                  edge_average_functional, operator_matrix)
from .geometry import DomainSpec, fluid_indicator
from .mesh import CoarseMesh, FineElementMesh, build_fine_mesh

log = logging.getLogger(__name__)

OPERATORS = ("diffusion", "advdiff")
FAMILIES = ("crouzeix_raviart", "linear", "oversampling")
FLUX_FORMS = ("c_flux", "a_flux")
BUBBLES = ("none", "diffusion_bubble", "advdiff_bubble")

# Relative size below which an edge functional is considered void.
DEGENERATE_TOL = 1e-12
# Recombination matrices worse than this fall back to the linear family.
OS_COND_LIMIT = 1e12


@dataclass(frozen=True)
class BasisConfig:
    """Which local problems to solve.

    ``flux_form=None`` resolves to ``c_flux`` for Dirichlet perforations and
    ``a_flux`` for Neumann ones. ``exterior_bc`` selects how edges on the
    outer boundary are handled: ``pointwise`` (trace fixed to zero) or
    ``weak`` (zero edge integral, like an inner edge with target 0).
    """

    operator: str = "diffusion"
    bc_family: str = "crouzeix_raviart"
    flux_form: str | None = None
    bubbles: str = "none"
    perforation_bc: str | None = None
    ratio: int = 3
    exterior_bc: str = "pointwise"

    def __post_init__(self):
        if self.operator not in OPERATORS:
            raise ValueError(f"operator must be one of {OPERATORS}")
        if self.bc_family not in FAMILIES:
            raise ValueError(f"bc_family must be one of {FAMILIES}")
        if self.flux_form is not None and self.flux_form not in FLUX_FORMS:
            raise ValueError(f"flux_form must be one of {FLUX_FORMS}")
        if self.bubbles not in BUBBLES:
            raise ValueError(f"bubbles must be one of {BUBBLES}")
        if self.perforation_bc not in (None, "dirichlet", "neumann"):
            raise ValueError("perforation_bc must be 'dirichlet' or 'neumann'")
        if int(self.ratio) < 1:
            raise ValueError("oversampling ratio must be >= 1")
        if self.exterior_bc not in ("pointwise", "weak"):
            raise ValueError("exterior_bc must be 'pointwise' or 'weak'")
        if self.perforation_bc == "neumann" and self.flux_form == "c_flux":
            raise ValueError("Neumann perforations use a_flux only")

    def resolved(self, spec: DomainSpec) -> "BasisConfig":
        bc = spec.perforation_bc
        if self.perforation_bc not in (None, bc):
            raise ValueError(f"config is for {self.perforation_bc} perforations, domain has {bc}")
        flux = self.flux_form or ("c_flux" if bc == "dirichlet" else "a_flux")
        if bc == "neumann" and flux == "c_flux":
            raise ValueError("Neumann perforations use a_flux only")
        return replace(self, perforation_bc=bc, flux_form=flux)

    def kind(self, operator: str) -> str:
        """Element form kind used by ``operator_matrix``."""
        if operator == "diffusion":
            return "diffusion"
        return "c" if self.flux_form == "c_flux" else "a"

    @property
    def bubble_operator(self) -> str | None:
        return {"none": None, "diffusion_bubble": "diffusion", "advdiff_bubble": "advdiff"}[self.bubbles]

    def key(self) -> str:
        parts = [self.operator, self.bc_family, str(self.flux_form), self.bubbles,
                 str(self.perforation_bc), self.exterior_bc]
        if self.bc_family == "oversampling":
            parts.append(f"r{int(self.ratio)}")
        return "/".join(parts)


@dataclass
class LocalBasis:
    """Basis functions of one coarse element as nodal fields on its fine mesh.

    ``functions[k]`` belongs to global DOF ``dof_ids[k]`` (an edge for the CR
    family, a vertex otherwise). ``multipliers[k, i]`` is the constant flux on
    local edge ``i`` (zero where no constraint applies).
    """

    parent: int
    family: str
    dof_ids: np.ndarray
    functions: np.ndarray
    active: np.ndarray
    edge_operator: str
    bubble: np.ndarray | None = None
    bubble_operator: str | None = None
    multipliers: np.ndarray | None = None
    bubble_multipliers: np.ndarray | None = None
    h: float = 0.0
    residual: float = 0.0
    flags: tuple[str, ...] = ()
    config_key: str = ""

    @property
    def n_nodes(self) -> int:
        return self.functions.shape[1]

    @property
    def has_bubble(self) -> bool:
        return self.bubble is not None


# ---------------------------------------------------------------------------
# Crouzeix-Raviart family


def _fixed_nodes(mesh: FineElementMesh, mode: str, exterior_bc: str) -> np.ndarray:
    if mode == "dirichlet":
        fixed = mesh.node_solid.copy()
    else:
        fixed = ~mesh.node_touches_fluid
    if exterior_bc == "pointwise":
        for tr in mesh.traces:
            if not tr.interior:
                fixed[tr.nodes] = True
    if mode != "dirichlet":
        fixed |= _floating_pockets(mesh, fixed)
    return fixed


def _floating_pockets(mesh: FineElementMesh, fixed: np.ndarray) -> np.ndarray:
    """Nodes of secondary fluid components that touch no fixed node.

    With Neumann perforations the fluid part of an element can split into a
    main region and small pockets cut off by holes. A pocket touching no
    pinned node is held only through edge integrals and makes the local
    problem nearly singular, so it is pinned to zero.
    """
    cells = mesh.cells[mesh.cell_fluid]
    if len(cells) == 0:
        return np.zeros(mesh.n_nodes, dtype=bool)
    i = cells[:, [0, 1, 2]].ravel()
    j = cells[:, [1, 2, 0]].ravel()
    graph = sp.coo_matrix((np.ones(len(i)), (i, j)), shape=(mesh.n_nodes,) * 2)
    _, label = connected_components(graph, directed=False)
    touch = mesh.node_touches_fluid
    comps, sizes = np.unique(label[touch], return_counts=True)
    if len(comps) < 2:
        return np.zeros(mesh.n_nodes, dtype=bool)
    main = comps[np.argmax(sizes)]
    anchored = np.unique(label[touch & fixed])
    drop = [c for c in comps if c != main and c not in anchored]
    return touch & np.isin(label, drop)


def _dependent(C: np.ndarray, r: np.ndarray) -> bool:
    """True if ``r`` lies (numerically) in the row span of ``C``."""
    coef, *_ = np.linalg.lstsq(C.T, r, rcond=None)
    return np.linalg.norm(C.T @ coef - r) <= 1e-10 * np.linalg.norm(r)


def _kkt(A: sp.spmatrix, C: np.ndarray):
    nc = C.shape[0]
    Cs = sp.csr_matrix(C)
    K = sp.bmat([[A, -Cs.T], [Cs, None]], format="csc") if nc else sp.csc_matrix(A)
    return K


def _cr_system(mesh, spec, alpha, b, cfg, operator):
    """Assemble and factor the saddle-point operator; returns a closure-like dict."""
    mode = spec.perforation_bc
    fixed = _fixed_nodes(mesh, mode, cfg.exterior_bc)
    free = np.flatnonzero(~fixed)
    full = operator_matrix(mesh, alpha, b, cfg.kind(operator))
    A = full[free][:, free]
    rows, targets_edge, local_index = [], [], []
    for tr in mesh.traces:
        if not tr.interior and cfg.exterior_bc != "weak":
            continue
        r = edge_average_functional(mesh, tr, mode)[free]
        length = tr.segment_length * (len(tr.nodes) - 1)
        if r.sum() <= DEGENERATE_TOL * length:
            continue
        if rows and _dependent(np.array(rows), r):
            # under-resolved edges whose free trace is only shared coarse vertices
            continue
        rows.append(r)
        targets_edge.append(tr.interior)
        local_index.append(tr.local_index)
    C = np.array(rows) if rows else np.zeros((0, len(free)))
    K = _kkt(A, C)
    try:
        lu = spla.splu(K, permc_spec="COLAMD")
    except RuntimeError as exc:
        raise SolverError(f"local saddle-point system of element {mesh.parent} is singular: {exc}") from exc
    return {"free": free, "C": C, "K": K, "lu": lu, "local_index": local_index, "full": full}


def _cr_solve(system, mesh, rhs_u: np.ndarray, rhs_g: np.ndarray):
    """Solve for several right-hand sides (columns); returns fields, multipliers, residual."""
    free, C = system["free"], system["C"]
    rhs = np.vstack([rhs_u, rhs_g])
    sol = system["lu"].solve(rhs)
    res = check_residual(system["K"], sol, rhs, 1e-10)
    fields = np.zeros((rhs.shape[1], mesh.n_nodes))
    fields[:, free] = sol[: len(free)].T
    lam = np.zeros((rhs.shape[1], 3))
    for row, i in enumerate(system["local_index"]):
        lam[:, i] = sol[len(free) + row]
    return fields, lam, res


def _zero_basis(mesh, coarse, cfg, family, flags):
    edges = _inner_edges(coarse, mesh.parent)
    n = mesh.n_nodes
    bub_op = cfg.bubble_operator
    return LocalBasis(mesh.parent, family, edges, np.zeros((len(edges), n)),
                      np.zeros(len(edges), dtype=bool), cfg.operator,
                      np.zeros(n) if bub_op else None, bub_op,
                      np.zeros((len(edges), 3)), np.zeros(3) if bub_op else None,
                      mesh.h, 0.0, flags, cfg.key())


def _inner_edges(coarse: CoarseMesh, t: int) -> np.ndarray:
    return np.array([e for e in coarse.tri_edges[t] if coarse.edge_interior[e]], dtype=np.int64)


def compute_cr_basis(coarse: CoarseMesh, mesh: FineElementMesh, spec: DomainSpec, alpha, b,
                     cfg: BasisConfig) -> LocalBasis:
    """CR edge functions of one element, plus the bubble when ``cfg`` asks for one."""
    cfg = cfg.resolved(spec)
    t = mesh.parent
    if mesh.fully_solid:
        return _zero_basis(mesh, coarse, cfg, "crouzeix_raviart", ("fully_solid",))
    b = as_field(b)
    system = _cr_system(mesh, spec, alpha, b, cfg, cfg.operator)
    edges = _inner_edges(coarse, t)
    free = system["free"]
    nc = system["C"].shape[0]
    # constraint row for each inner edge (or None when degenerate)
    row_of = {}
    for row, i in enumerate(system["local_index"]):
        row_of[int(coarse.tri_edges[t, i])] = row
    active = np.array([int(e) in row_of for e in edges], dtype=bool)
    cols_u = [np.zeros(len(free)) for _ in edges]
    cols_g = []
    for e in edges:
        g = np.zeros(nc)
        if int(e) in row_of:
            g[row_of[int(e)]] = 1.0
        cols_g.append(g)
    bub_op = cfg.bubble_operator
    share = bub_op == cfg.operator
    if share:
        cols_u.append(constant_load(mesh)[free])
        cols_g.append(np.zeros(nc))
    rhs_u = np.array(cols_u).T if cols_u else np.zeros((len(free), 0))
    rhs_g = np.array(cols_g).T if cols_g else np.zeros((nc, 0))
    fields, lam, res = _cr_solve(system, mesh, rhs_u, rhs_g)
    functions = fields[: len(edges)]
    functions[~active] = 0.0
    lam_e = lam[: len(edges)]
    lam_e[~active] = 0.0
    flags = tuple(f"degenerate_edge:{int(e)}" for e, a in zip(edges, active) if not a)
    bubble = bubble_lam = None
    if share:
        bubble, bubble_lam = fields[-1], lam[-1]
    elif bub_op is not None:
        bubble, bubble_lam, r2 = _cr_bubble(mesh, spec, alpha, b, cfg, bub_op)
        res = max(res, r2)
    return LocalBasis(t, "crouzeix_raviart", edges, functions, active, cfg.operator,
                      bubble, bub_op, lam_e, bubble_lam, mesh.h, res, flags, cfg.key())


def _cr_bubble(mesh, spec, alpha, b, cfg, operator):
    system = _cr_system(mesh, spec, alpha, b, cfg, operator)
    free = system["free"]
    nc = system["C"].shape[0]
    fields, lam, res = _cr_solve(system, mesh, constant_load(mesh)[free][:, None], np.zeros((nc, 1)))
    return fields[0], lam[0], res


def compute_bubble(coarse: CoarseMesh, mesh: FineElementMesh, spec: DomainSpec, alpha, b,
                   cfg: BasisConfig, operator: str | None = None):
    """CR bubble: unit source, zero inner-edge integrals, constant edge fluxes.

    Returns ``(field, multipliers)``; a fully perforated element gives zeros.
    """
    cfg = cfg.resolved(spec)
    operator = operator or cfg.bubble_operator or cfg.operator
    if mesh.fully_solid:
        return np.zeros(mesh.n_nodes), np.zeros(3)
    psi, mu, _ = _cr_bubble(mesh, spec, alpha, as_field(b), cfg, operator)
    return psi, mu


# ---------------------------------------------------------------------------
# Nodal families


def barycentric(coarse_vertices: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Barycentric coordinates (n, 3) of ``points`` w.r.t. a triangle."""
    v0, v1, v2 = coarse_vertices
    T = np.column_stack([v1 - v0, v2 - v0])
    st = np.linalg.solve(T, (points - v0).T).T
    return np.column_stack([1.0 - st.sum(axis=1), st])


def _dirichlet_fill(A: sp.csr_matrix, fixed: np.ndarray, values: np.ndarray, load: np.ndarray | None):
    """Solve ``A u = load`` on free nodes with ``u = values`` on fixed nodes (columns)."""
    free = np.flatnonzero(~fixed)
    fix = np.flatnonzero(fixed)
    values = np.atleast_2d(values)
    out = values.copy()
    if len(free) == 0:
        return out, 0.0
    A_ff = sp.csc_matrix(A[free][:, free])
    rhs = -(A[free][:, fix] @ values[:, fix].T)
    if load is not None:
        rhs = rhs + load[free][:, None]
    lu = spla.splu(A_ff, permc_spec="COLAMD")
    sol = lu.solve(rhs)
    res = check_residual(A_ff, sol, rhs, 1e-10)
    out[:, free] = sol.T
    return out, res


def _nodal_fixed(mesh_like, boundary: np.ndarray, mode: str, node_solid, touches_fluid) -> np.ndarray:
    fixed = boundary.copy()
    if mode == "dirichlet":
        fixed |= node_solid
    else:
        fixed |= ~touches_fluid
    return fixed


def _homogeneous_bubble(mesh, spec, alpha, b, cfg, operator):
    A = operator_matrix(mesh, alpha, b, cfg.kind(operator))
    fixed = _nodal_fixed(mesh, mesh.node_on_element_boundary, spec.perforation_bc,
                         mesh.node_solid, mesh.node_touches_fluid)
    vals, res = _dirichlet_fill(A, fixed, np.zeros(mesh.n_nodes), constant_load(mesh))
    return vals[0], res


def compute_linear_basis(coarse: CoarseMesh, mesh: FineElementMesh, spec: DomainSpec, alpha, b,
                         cfg: BasisConfig | None = None) -> LocalBasis:
    """Nodal functions with the hat-function trace on the element boundary."""
    cfg = (cfg or BasisConfig(bc_family="linear")).resolved(spec)
    t = mesh.parent
    verts = coarse.triangles[t]
    if mesh.fully_solid:
        return _nodal_zero(mesh, cfg, verts, "linear", ("fully_solid",))
    b = as_field(b)
    lam = barycentric(coarse.vertices[verts], mesh.points).T  # (3, n)
    solid_mask = mesh.node_solid if spec.perforation_bc == "dirichlet" else np.zeros(mesh.n_nodes, bool)
    data = np.where(solid_mask[None, :], 0.0, lam)
    data[:, ~mesh.node_on_element_boundary] = 0.0
    A = operator_matrix(mesh, alpha, b, cfg.kind(cfg.operator))
    fixed = _nodal_fixed(mesh, mesh.node_on_element_boundary, spec.perforation_bc,
                         mesh.node_solid, mesh.node_touches_fluid)
    funcs, res = _dirichlet_fill(A, fixed, data, None)
    bubble = None
    if cfg.bubble_operator:
        bubble, r2 = _homogeneous_bubble(mesh, spec, alpha, b, cfg, cfg.bubble_operator)
        res = max(res, r2)
    return LocalBasis(t, "linear", verts.astype(np.int64), funcs, np.ones(3, dtype=bool),
                      cfg.operator, bubble, cfg.bubble_operator, None, None, mesh.h, res, (),
                      cfg.key())


def _nodal_zero(mesh, cfg, verts, family, flags):
    bub = np.zeros(mesh.n_nodes) if cfg.bubble_operator else None
    return LocalBasis(mesh.parent, family, verts.astype(np.int64), np.zeros((3, mesh.n_nodes)),
                      np.zeros(3, dtype=bool), cfg.operator, bub, cfg.bubble_operator,
                      None, None, mesh.h, 0.0, flags, cfg.key())


@dataclass
class PatchMesh:
    """Structured subdivision of an arbitrary triangle, clipped to the unit square."""

    corners: np.ndarray
    L: int
    points: np.ndarray
    cells: np.ndarray
    cell_fluid: np.ndarray
    node_solid: np.ndarray
    node_boundary: np.ndarray
    node_index: np.ndarray  # (L+1, L+1) map (a, b) -> node id or -1
    cell_ab: np.ndarray = field(default=None, repr=False)  # (a, b, upper) per cell
    areas: np.ndarray = field(default=None, repr=False)
    grads: np.ndarray = field(default=None, repr=False)
    barycenters: np.ndarray = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.points)

    @property
    def node_touches_fluid(self) -> np.ndarray:
        flag = np.zeros(self.n_nodes, dtype=bool)
        flag[self.cells[self.cell_fluid].ravel()] = True
        return flag

    def to_xy(self, s, t):
        v0, v1, v2 = self.corners
        return v0 + np.multiply.outer(s, v1 - v0) + np.multiply.outer(t, v2 - v0)

    def evaluate(self, values: np.ndarray, pts: np.ndarray) -> np.ndarray:
        """Point evaluation of P1 fields (rows of ``values``) at ``pts``.

        Points on cell boundaries may lie next to dropped cells, so a few
        neighbouring candidates are tried and the first containing one wins.
        """
        v0, v1, v2 = self.corners
        T = np.column_stack([v1 - v0, v2 - v0])
        st = np.linalg.solve(T, (pts - v0).T).T * self.L
        values = np.atleast_2d(values)
        out = np.full((len(values), len(pts)), np.nan)
        done = np.zeros(len(pts), dtype=bool)
        base_a = np.floor(st[:, 0]).astype(np.int64)
        base_b = np.floor(st[:, 1]).astype(np.int64)
        L = self.L
        for da in (0, -1, 1):
            for db in (0, -1, 1):
                for upper in (False, True):
                    a, b = base_a + da, base_b + db
                    fa, fb = st[:, 0] - a, st[:, 1] - b
                    if upper:
                        # nodes (a+1,b), (a+1,b+1), (a,b+1)
                        w = np.stack([1 - fb, fa + fb - 1, 1 - fa])
                        na = np.stack([a + 1, a + 1, a])
                        nb = np.stack([b, b + 1, b + 1])
                    else:
                        w = np.stack([1 - fa - fb, fa, fb])
                        na = np.stack([a, a + 1, a])
                        nb = np.stack([b, b, b + 1])
                    ok = ~done & np.all(w >= -1e-9, axis=0)
                    ok &= np.all((na >= 0) & (na <= L) & (nb >= 0) & (nb <= L), axis=0)
                    if not ok.any():
                        continue
                    idx = self.node_index[np.clip(na, 0, L), np.clip(nb, 0, L)]
                    ok &= np.all(idx >= 0, axis=0)
                    # the three nodes existing is necessary but the cell itself must exist too
                    ok &= self._has_cell(a, b, upper)
                    if not ok.any():
                        continue
                    cols = np.flatnonzero(ok)
                    out[:, cols] = np.einsum("kp,rkp->rp", w[:, cols], values[:, idx[:, cols]])
                    done[cols] = True
        if not done.all():
            raise ValueError("evaluation point outside the patch mesh")
        return out

    def _has_cell(self, a, b, upper) -> np.ndarray:
        if getattr(self, "_exists", None) is None:
            ex = np.zeros((self.L, self.L, 2), dtype=bool)
            ex[self.cell_ab[:, 0], self.cell_ab[:, 1], self.cell_ab[:, 2]] = True
            self._exists = ex
        inside = (a >= 0) & (a < self.L) & (b >= 0) & (b < self.L)
        out = np.zeros(len(a), dtype=bool)
        out[inside] = self._exists[a[inside], b[inside], int(upper)]
        return out


def build_patch_mesh(corners: np.ndarray, L: int, spec: DomainSpec | None) -> PatchMesh:
    """Structured 4-way refinement of a triangle with ``L`` segments per side.

    Cells whose barycenter leaves the unit square are dropped. A node is solid
    when any of the (up to six) structured cells around it is solid, which
    reproduces the global lattice rule when the triangle is a lattice element.
    """
    corners = np.asarray(corners, dtype=float)
    v0, v1, v2 = corners
    e1, e2 = (v1 - v0) / L, (v2 - v0) / L

    def bary(a, b, upper):
        # barycenter of structured cell (a, b), lower or upper
        if upper:
            return v0 + np.multiply.outer(a + 2 / 3, e1) + np.multiply.outer(b + 2 / 3, e2)
        return v0 + np.multiply.outer(a + 1 / 3, e1) + np.multiply.outer(b + 1 / 3, e2)

    def inside(p):
        tol = 1e-12
        return (p[..., 0] > -tol) & (p[..., 0] < 1 + tol) & (p[..., 1] > -tol) & (p[..., 1] < 1 + tol)

    def is_solid(p):
        if spec is None:
            return np.zeros(p.shape[:-1], dtype=bool)
        return ~fluid_indicator(p[..., 0], p[..., 1], spec)

    A, B = np.meshgrid(np.arange(L), np.arange(L), indexing="ij")
    lo_ok = (A + B) <= L - 1
    up_ok = (A + B) <= L - 2
    cells, fluid, ids = [], [], []
    for upper, ok in ((False, lo_ok), (True, up_ok)):
        a, b_ = A[ok], B[ok]
        bc = bary(a.astype(float), b_.astype(float), upper)
        keep = inside(bc)
        a, b_, bc = a[keep], b_[keep], bc[keep]
        ids.append(np.stack([a, b_, np.full_like(a, int(upper))], axis=1))
        if upper:
            tri = np.stack([[a + 1, b_], [a + 1, b_ + 1], [a, b_ + 1]], axis=0)
        else:
            tri = np.stack([[a, b_], [a + 1, b_], [a, b_ + 1]], axis=0)
        cells.append(tri.transpose(2, 0, 1))  # (m, 3, 2)
        fluid.append(~is_solid(bc))
    cell_ab = np.concatenate(cells)
    cell_fluid = np.concatenate(fluid)
    flat = cell_ab[..., 0] * (L + 1) + cell_ab[..., 1]
    used, local = np.unique(flat, return_inverse=True)
    cells_local = local.reshape(-1, 3)
    na, nb = used // (L + 1), used % (L + 1)
    node_index = -np.ones((L + 1, L + 1), dtype=np.int64)
    node_index[na, nb] = np.arange(len(used))
    points = v0 + np.multiply.outer(na, e1) + np.multiply.outer(nb, e2)

    # six structured cells around each node: lower (a,b),(a-1,b),(a,b-1); upper (a-1,b),(a-1,b-1),(a,b-1)
    fa, fb = na.astype(float), nb.astype(float)
    node_solid = np.zeros(len(used), dtype=bool)
    for da, db, upper in ((0, 0, False), (-1, 0, False), (0, -1, False),
                          (-1, 0, True), (-1, -1, True), (0, -1, True)):
        bc = bary(fa + da, fb + db, upper)
        node_solid |= inside(bc) & is_solid(bc)

    # boundary of the clipped patch: edges belonging to exactly one cell
    p = cells_local.ravel()
    q = cells_local[:, [1, 2, 0]].ravel()
    key = np.minimum(p, q) * len(used) + np.maximum(p, q)
    uniq, counts = np.unique(key, return_counts=True)
    bkeys = uniq[counts == 1]
    node_boundary = np.zeros(len(used), dtype=bool)
    node_boundary[bkeys // len(used)] = True
    node_boundary[bkeys % len(used)] = True

    from .fem import p1_geometry
    mesh = PatchMesh(corners, L, points, cells_local, cell_fluid, node_solid, node_boundary, node_index,
                     np.concatenate(ids))
    mesh.areas, mesh.grads, mesh.barycenters = p1_geometry(points, cells_local)
    return mesh


def compute_oversampling_basis(coarse: CoarseMesh, mesh: FineElementMesh, spec: DomainSpec, alpha, b,
                               ratio: int = 3, cfg: BasisConfig | None = None) -> LocalBasis:
    """Oversampled nodal functions recombined to interpolate vertex deltas on K."""
    cfg = (cfg or BasisConfig(bc_family="oversampling", ratio=ratio)).resolved(spec)
    cfg = replace(cfg, bc_family="oversampling", ratio=int(ratio))
    t = mesh.parent
    verts = coarse.triangles[t]
    if mesh.fully_solid:
        return _nodal_zero(mesh, cfg, verts, "oversampling", ("fully_solid",))
    b = as_field(b)
    Kv = coarse.vertices[verts]
    center = Kv.mean(axis=0)
    Sv = center + int(ratio) * (Kv - center)
    patch = build_patch_mesh(Sv, int(ratio) * mesh.M, spec)
    data = barycentric(Sv, patch.points).T
    if spec.perforation_bc == "dirichlet":
        data[:, patch.node_solid] = 0.0
    else:
        data[:, ~patch.node_touches_fluid] = 0.0
    A = operator_matrix(patch, alpha, b, cfg.kind(cfg.operator))
    fixed = _nodal_fixed(patch, patch.node_boundary, spec.perforation_bc,
                         patch.node_solid, patch.node_touches_fluid)
    data[:, ~fixed] = 0.0
    sol, res = _dirichlet_fill(A, fixed, data, None)
    chi = patch.evaluate(sol, mesh.points)  # (3, n) restricted to K
    P = chi[:, mesh.vertices]  # P[i, k] = chi_i(v_k)
    cond = np.linalg.cond(P)
    if not np.isfinite(cond) or cond > OS_COND_LIMIT:
        log.warning("element %d: oversampling recombination singular (cond=%.3g), using linear basis", t, cond)
        lin = compute_linear_basis(coarse, mesh, spec, alpha, b, replace(cfg, bc_family="linear"))
        return replace(lin, family="oversampling", flags=lin.flags + ("oversampling_fallback",),
                       config_key=cfg.key())
    coef = np.linalg.inv(P)  # phi_k = sum_i coef[k, i] chi_i, so that coef @ P = I
    funcs = coef @ chi
    bubble = None
    if cfg.bubble_operator:
        bubble, r2 = _homogeneous_bubble(mesh, spec, alpha, b, cfg, cfg.bubble_operator)
        res = max(res, r2)
    return LocalBasis(t, "oversampling", verts.astype(np.int64), funcs, np.ones(3, dtype=bool),
                      cfg.operator, bubble, cfg.bubble_operator, None, None, mesh.h, res, (),
                      cfg.key())


# ---------------------------------------------------------------------------


def compute_local_basis(coarse: CoarseMesh, t: int, spec: DomainSpec, alpha, b, cfg: BasisConfig,
                        m: int, mesh: FineElementMesh | None = None) -> LocalBasis:
    """Dispatch on ``cfg.bc_family``; builds the fine element mesh if not given."""
    if mesh is None:
        mesh = build_fine_mesh(coarse, t, spec, m)
    if cfg.bc_family == "crouzeix_raviart":
        basis = compute_cr_basis(coarse, mesh, spec, alpha, b, cfg)
    elif cfg.bc_family == "linear":
        basis = compute_linear_basis(coarse, mesh, spec, alpha, b, cfg)
    else:
        basis = compute_oversampling_basis(coarse, mesh, spec, alpha, b, cfg.ratio, cfg)
    return basis


def constraint_residual(basis: LocalBasis, mesh: FineElementMesh, mode: str) -> float:
    """max |int_E' Phi^E - delta| and |int_E' Psi| over inner edges of the element."""
    if basis.family != "crouzeix_raviart":
        raise ValueError("constraint residual is defined for the CR family only")
    worst = 0.0
    for tr in mesh.traces:
        if not tr.interior:
            continue
        r = edge_average_functional(mesh, tr, mode)
        for k, e in enumerate(basis.dof_ids):
            if not basis.active[k]:
                continue
            target = 1.0 if int(e) == tr.edge else 0.0
            if not any(int(e2) == tr.edge and basis.active[j] for j, e2 in enumerate(basis.dof_ids)):
                continue  # degenerate target edge carries no constraint
            worst = max(worst, abs(r @ basis.functions[k] - target))
        if basis.bubble is not None and np.any(r):
            worst = max(worst, abs(r @ basis.bubble))
    return worst
