"""Coarse triangulation of the unit square and nested fine meshes.

Every mesh here lives on one global lattice of ``n x n`` squares, each cut
along its (0,0)-(1,1) diagonal. A coarse triangle of the ``N x N`` mesh
refined ``m`` times is exactly the set of lattice triangles it covers, with
``n = N * 2**m``. Fine nodes are identified by their global lattice index,
so traces on a shared coarse edge coincide node for node.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .geometry import DomainSpec, fluid_indicator

# Local vertex order of the two halves of a lattice square, as (di, dj).
LOWER = ((0, 0), (1, 0), (1, 1))
UPPER = ((0, 0), (1, 1), (0, 1))


@dataclass(frozen=True)
class CoarseMesh:
    """Uniform ``N x N`` mesh of 2N^2 right triangles.

    ``tri_edges[t, i]`` is the edge opposite local vertex ``i`` of triangle
    ``t``; ``edge_tris[e]`` lists the (one or two) adjacent triangles, with -1
    padding.
    """

    N: int
    vertices: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray
    edge_interior: np.ndarray
    tri_edges: np.ndarray
    edge_tris: np.ndarray

    @property
    def H(self) -> float:
        return 1.0 / self.N

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def interior_edges(self) -> np.ndarray:
        return np.flatnonzero(self.edge_interior)

    @property
    def interior_vertices(self) -> np.ndarray:
        ij = self.vertex_ij
        inside = (ij[:, 0] > 0) & (ij[:, 0] < self.N) & (ij[:, 1] > 0) & (ij[:, 1] < self.N)
        return np.flatnonzero(inside)

    @property
    def vertex_ij(self) -> np.ndarray:
        v = np.arange(len(self.vertices))
        return np.stack([v % (self.N + 1), v // (self.N + 1)], axis=1)

    def triangle_square(self, t: int) -> tuple[int, int, int]:
        """(I, J, half) of triangle ``t``; half 0 is the lower triangle."""
        s, half = divmod(int(t), 2)
        return s % self.N, s // self.N, half


def build_coarse_mesh(N: int) -> CoarseMesh:
    if N < 1:
        raise ValueError("N must be >= 1")
    H = 1.0 / N
    I, J = np.meshgrid(np.arange(N + 1), np.arange(N + 1), indexing="xy")
    vertices = np.stack([I.ravel() * H, J.ravel() * H], axis=1)

    def vid(i, j):
        return i + (N + 1) * j

    tris = []
    for J_ in range(N):
        for I_ in range(N):
            for pattern in (LOWER, UPPER):
                tris.append([vid(I_ + di, J_ + dj) for di, dj in pattern])
    triangles = np.array(tris, dtype=np.int64)

    edge_index: dict[tuple[int, int], int] = {}
    edges = []
    tri_edges = np.empty_like(triangles)
    for t, tri in enumerate(triangles):
        for i in range(3):
            a, b = tri[(i + 1) % 3], tri[(i + 2) % 3]
            key = (min(a, b), max(a, b))
            if key not in edge_index:
                edge_index[key] = len(edges)
                edges.append(key)
            tri_edges[t, i] = edge_index[key]
    edges = np.array(edges, dtype=np.int64)
    edge_tris = -np.ones((len(edges), 2), dtype=np.int64)
    for t in range(len(triangles)):
        for e in tri_edges[t]:
            slot = 0 if edge_tris[e, 0] < 0 else 1
            edge_tris[e, slot] = t
    edge_interior = edge_tris[:, 1] >= 0
    for arr in (vertices, triangles, edges, edge_interior, tri_edges, edge_tris):
        arr.setflags(write=False)
    return CoarseMesh(N, vertices, triangles, edges, edge_interior, tri_edges, edge_tris)


def lattice_cells(n: int, cell_ids=None) -> np.ndarray:
    """Node triples of lattice triangles; global cell id = 2*(i + n*j) + half."""
    if cell_ids is None:
        cell_ids = np.arange(2 * n * n)
    s, half = np.divmod(np.asarray(cell_ids, dtype=np.int64), 2)
    i, j = s % n, s // n
    cells = np.empty((len(s), 3), dtype=np.int64)
    lower = half == 0
    for k in range(3):
        di = np.where(lower, LOWER[k][0], UPPER[k][0])
        dj = np.where(lower, LOWER[k][1], UPPER[k][1])
        cells[:, k] = (i + di) + (n + 1) * (j + dj)
    return cells


def lattice_barycenters(n: int, cell_ids=None) -> np.ndarray:
    if cell_ids is None:
        cell_ids = np.arange(2 * n * n)
    cell_ids = np.asarray(cell_ids)
    s, half = np.divmod(cell_ids, 2)
    i, j = s % n, s // n
    h = 1.0 / n
    bx = np.where(half == 0, i + 2.0 / 3.0, i + 1.0 / 3.0) * h
    by = np.where(half == 0, j + 1.0 / 3.0, j + 2.0 / 3.0) * h
    return np.stack([bx, by], axis=1)


@lru_cache(maxsize=16)
def lattice_solid(spec: DomainSpec, n: int) -> np.ndarray:
    """Solid flag per lattice cell (barycenter rule)."""
    bc = lattice_barycenters(n)
    solid = ~fluid_indicator(bc[:, 0], bc[:, 1], spec)
    solid.setflags(write=False)
    return solid


@lru_cache(maxsize=16)
def lattice_node_solid(spec: DomainSpec, n: int) -> np.ndarray:
    """Node flag: True when the node belongs to at least one solid cell."""
    solid = lattice_solid(spec, n)
    cells = lattice_cells(n)
    flag = np.zeros((n + 1) ** 2, dtype=bool)
    flag[cells[solid].ravel()] = True
    flag.setflags(write=False)
    return flag


@dataclass
class FineGrid:
    """The full lattice on the unit square with its fluid/solid classification."""

    n: int
    spec: DomainSpec | None
    points: np.ndarray
    cells: np.ndarray
    cell_fluid: np.ndarray
    node_solid: np.ndarray

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def n_nodes(self) -> int:
        return (self.n + 1) ** 2

    @property
    def boundary_nodes(self) -> np.ndarray:
        ij = np.arange(self.n_nodes)
        i, j = ij % (self.n + 1), ij // (self.n + 1)
        return np.flatnonzero((i == 0) | (j == 0) | (i == self.n) | (j == self.n))

    def coarse_parent(self, N: int) -> np.ndarray:
        """Coarse triangle index of every lattice cell for an N x N coarse mesh."""
        if self.n % N:
            raise ValueError(f"fine resolution {self.n} is not a multiple of N={N}")
        M = self.n // N
        c = np.arange(2 * self.n * self.n)
        s, half = np.divmod(c, 2)
        i, j = s % self.n, s // self.n
        I, J = i // M, j // M
        a, b = i - I * M, j - J * M
        upper = (b > a) | ((a == b) & (half == 1))
        return 2 * (I + N * J) + upper.astype(np.int64)


def build_fine_grid(n: int, spec: DomainSpec | None = None) -> FineGrid:
    i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="xy")
    points = np.stack([i.ravel() / n, j.ravel() / n], axis=1)
    cells = lattice_cells(n)
    if spec is None:
        fluid = np.ones(len(cells), dtype=bool)
        node_solid = np.zeros(len(points), dtype=bool)
    else:
        fluid = ~lattice_solid(spec, n)
        node_solid = lattice_node_solid(spec, n)
    return FineGrid(n, spec, points, cells, fluid, node_solid)


@dataclass
class EdgeTrace:
    """1-D trace of a fine element mesh on one coarse edge."""

    edge: int
    local_index: int  # position in the parent's tri_edges row
    interior: bool
    nodes: np.ndarray  # local node indices, ordered along the edge
    segment_cells: np.ndarray  # local cell adjacent to each segment
    segment_length: float
    segment_fluid: np.ndarray | None = None  # lattice cells on both sides fluid


@dataclass
class FineElementMesh:
    """Fine triangulation of one coarse triangle, taken from the global lattice."""

    parent: int
    N: int
    m: int
    points: np.ndarray
    cells: np.ndarray
    node_gid: np.ndarray
    cell_gid: np.ndarray
    cell_fluid: np.ndarray
    node_solid: np.ndarray  # global rule: node touches any solid lattice cell
    node_on_omega_boundary: np.ndarray
    node_on_element_boundary: np.ndarray
    traces: list[EdgeTrace]
    vertices: np.ndarray  # local node index of each coarse vertex
    areas: np.ndarray = field(repr=False, default=None)
    grads: np.ndarray = field(repr=False, default=None)
    barycenters: np.ndarray = field(repr=False, default=None)

    @property
    def M(self) -> int:
        return 2 ** self.m

    @property
    def n(self) -> int:
        return self.N * self.M

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def n_nodes(self) -> int:
        return len(self.points)

    @property
    def fully_solid(self) -> bool:
        return not self.cell_fluid.any()

    @property
    def node_touches_fluid(self) -> np.ndarray:
        flag = np.zeros(self.n_nodes, dtype=bool)
        flag[self.cells[self.cell_fluid].ravel()] = True
        return flag

    def node_tags(self) -> np.ndarray:
        """Categorical node tags: 'solid', 'perforation_boundary', 'coarse_edge', 'interior_fluid'."""
        tags = np.full(self.n_nodes, "interior_fluid", dtype=object)
        tags[self.node_on_element_boundary] = "coarse_edge"
        touches = self.node_touches_fluid
        tags[touches & self.node_solid] = "perforation_boundary"
        tags[~touches] = "solid"
        return tags


def build_fine_mesh(coarse: CoarseMesh, t: int, spec: DomainSpec | None, m: int) -> FineElementMesh:
    """Structured 4**m refinement of coarse triangle ``t`` with staircase classification."""
    if m < 0:
        raise ValueError("refinement level m must be >= 0")
    N = coarse.N
    M = 2 ** m
    n = N * M
    I, J, upper = coarse.triangle_square(t)
    a, b = np.meshgrid(np.arange(M), np.arange(M), indexing="xy")
    a, b = a.ravel(), b.ravel()
    if upper:
        full = b > a
        diag_half = 1
    else:
        full = a > b
        diag_half = 0
    sq_i = I * M + a
    sq_j = J * M + b
    sq = sq_i + n * sq_j
    gids = np.concatenate([2 * sq[full], 2 * sq[full] + 1, 2 * sq[a == b] + diag_half])
    gids.sort()
    gcells = lattice_cells(n, gids)
    node_gid, local = np.unique(gcells, return_inverse=True)
    cells = local.reshape(-1, 3)
    gi, gj = node_gid % (n + 1), node_gid // (n + 1)
    points = np.stack([gi / n, gj / n], axis=1)
    if spec is None:
        cell_fluid = np.ones(len(gids), dtype=bool)
        node_solid = np.zeros(len(node_gid), dtype=bool)
    else:
        cell_fluid = ~lattice_solid(spec, n)[gids]
        node_solid = lattice_node_solid(spec, n)[node_gid]
    on_omega = (gi == 0) | (gj == 0) | (gi == n) | (gj == n)

    tri = coarse.triangles[t]
    vij = coarse.vertex_ij[tri] * M
    vert_gid = vij[:, 0] + (n + 1) * vij[:, 1]
    vertices = np.searchsorted(node_gid, vert_gid)

    # Boundary segments of the element belong to exactly one local cell.
    p = cells.ravel()
    q = cells[:, [1, 2, 0]].ravel()
    seg_keys = np.minimum(p, q) * len(node_gid) + np.maximum(p, q)
    order = np.argsort(seg_keys, kind="stable")
    seg_sorted = seg_keys[order]
    seg_owner = np.repeat(np.arange(len(cells)), 3)[order]
    traces = []
    on_elem_boundary = np.zeros(len(node_gid), dtype=bool)
    for i in range(3):
        e = int(coarse.tri_edges[t, i])
        p0, p1 = vij[(i + 1) % 3], vij[(i + 2) % 3]
        steps = np.arange(M + 1)[:, None]
        lattice_pts = p0[None, :] + (p1 - p0)[None, :] * steps // M
        tgid = lattice_pts[:, 0] + (n + 1) * lattice_pts[:, 1]
        tnodes = np.searchsorted(node_gid, tgid)
        a_, b_ = tnodes[:-1], tnodes[1:]
        keys = np.minimum(a_, b_) * len(node_gid) + np.maximum(a_, b_)
        segs = seg_owner[np.searchsorted(seg_sorted, keys)]
        length = float(np.linalg.norm((p1 - p0) / n)) / M
        seg_fluid = cell_fluid[segs].copy()
        if coarse.edge_interior[e] and spec is not None:
            other = _across(lattice_pts[:-1], lattice_pts[1:], gids[segs], n)
            seg_fluid &= ~lattice_solid(spec, n)[other]
        traces.append(EdgeTrace(e, i, bool(coarse.edge_interior[e]), tnodes, segs, length, seg_fluid))
        on_elem_boundary[tnodes] = True
    mesh = FineElementMesh(t, N, m, points, cells, node_gid, gids, cell_fluid, node_solid,
                           on_omega, on_elem_boundary, traces, vertices)
    from .fem import p1_geometry
    mesh.areas, mesh.grads, mesh.barycenters = p1_geometry(points, cells)
    return mesh


def _across(p: np.ndarray, q: np.ndarray, own: np.ndarray, n: int) -> np.ndarray:
    """Lattice cell on the other side of each lattice segment p-q from cell ``own``."""
    lo = np.minimum(p, q)
    d = np.abs(q - p)
    i, j = lo[:, 0], lo[:, 1]
    horiz = d[:, 1] == 0
    vert = d[:, 0] == 0
    # horizontal: upper half of square (i, j-1) below, lower half of (i, j) above
    # vertical: lower half of (i-1, j) left, upper half of (i, j) right
    # diagonal: both halves of (i, j)
    c1 = np.where(horiz, 2 * (i + n * (j - 1)) + 1, np.where(vert, 2 * (i - 1 + n * j), 2 * (i + n * j)))
    c2 = np.where(horiz, 2 * (i + n * j), np.where(vert, 2 * (i + n * j) + 1, 2 * (i + n * j) + 1))
    return np.where(c1 == own, c2, c1)


def default_refinement(H: float, epsilon: float, ratio: float = 20.0) -> int:
    """Smallest m with H / 2**m <= min(epsilon / ratio, H / 8)."""
    target = min(epsilon / ratio, H / 8.0)
    m = 0
    while H / 2 ** m > target * (1 + 1e-12):
        m += 1
    return m


def dump_mesh(mesh, path) -> None:
    """Plain-text node/element listing for external viewers."""
    with open(path, "w") as fh:
        fh.write(f"# nodes {len(mesh.points)}\n")
        for x, y in mesh.points:
            fh.write(f"{x:.17g} {y:.17g}\n")
        fh.write(f"# cells {len(mesh.cells)}\n")
        for (a, b, c), fl in zip(mesh.cells, mesh.cell_fluid):
            fh.write(f"{a} {b} {c} {'fluid' if fl else 'solid'}\n")
