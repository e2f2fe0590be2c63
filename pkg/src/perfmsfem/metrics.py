"""Broken H1 seminorms, relative errors and the boundary-layer split.

Broken fields are arrays of shape ``(2 n^2, 3)``: P1 vertex values on every
cell of the global ``n x n`` lattice, in lattice cell order. Fields from
different lattice resolutions are compared after prolongation to the finer
one by point evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .fem import as_field, p1_geometry
from .mesh import lattice_barycenters, lattice_cells


@dataclass(frozen=True)
class Region:
    """``whole``, ``inside`` or ``outside`` the outflow layer of width ``delta``."""

    kind: str = "whole"
    delta: float = 0.0
    peclet: float = float("nan")
    flagged: bool = False

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        if self.kind == "whole":
            return np.ones(len(pts), dtype=bool)
        inside = (pts[:, 0] > 1.0 - self.delta) | (pts[:, 1] > 1.0 - self.delta)
        return inside if self.kind == "inside" else ~inside

    def complement(self) -> "Region":
        other = {"inside": "outside", "outside": "inside", "whole": "whole"}[self.kind]
        return Region(other, self.delta, self.peclet, self.flagged)


WHOLE = Region()


def layer_peclet(b, alpha: float) -> float:
    """Pe = sup |b| / (2 alpha), Euclidean norm."""
    return as_field(b).sup_norm() / (2.0 * alpha)


def layer_region(b, alpha: float, kind: str = "inside") -> Region:
    """Upper/right band of width log(Pe)/Pe, clamped to (0, 0.5].

    For Pe <= 1 there is no layer: the whole domain is returned, flagged.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    pe = layer_peclet(b, alpha)
    if not pe > 1.0:
        return Region("whole", 0.0, pe, True)
    delta = min(math.log(pe) / pe, 0.5)
    return Region(kind, delta, pe, False)


@lru_cache(maxsize=8)
def _lattice_geometry(n: int):
    i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="xy")
    pts = np.stack([i.ravel() / n, j.ravel() / n], axis=1)
    areas, grads, _ = p1_geometry(pts, lattice_cells(n))
    return areas, grads, lattice_barycenters(n)


def lattice_size(dg: np.ndarray) -> int:
    n = int(round(math.sqrt(dg.shape[0] / 2)))
    if 2 * n * n != dg.shape[0]:
        raise ValueError("broken field does not match a square lattice")
    return n


def cell_h1_squared(dg: np.ndarray) -> np.ndarray:
    """|grad u|^2 * area per lattice cell."""
    n = lattice_size(dg)
    areas, grads, _ = _lattice_geometry(n)
    g = np.einsum("ci,cik->ck", dg, grads)
    return (g * g).sum(axis=1) * areas


def cell_l2_squared(dg: np.ndarray) -> np.ndarray:
    """Exact per-cell ``int v^2`` of a broken P1 field on its lattice."""
    n = lattice_size(dg)
    area = 0.5 / (n * n)
    return area / 12.0 * ((dg * dg).sum(axis=1) + dg.sum(axis=1) ** 2)


def cell_mask(n: int, region: Region = WHOLE, fluid: np.ndarray | None = None) -> np.ndarray:
    _, _, bary = _lattice_geometry(n)
    mask = region.contains(bary)
    if fluid is not None:
        mask &= fluid
    return mask


def broken_h1(dg: np.ndarray, region: Region = WHOLE, fluid: np.ndarray | None = None) -> float:
    """(sum over cells in region of ||grad u||^2)^(1/2); cells by barycenter."""
    n = lattice_size(dg)
    return float(math.sqrt(cell_h1_squared(dg)[cell_mask(n, region, fluid)].sum()))


def l2_norm(dg: np.ndarray, region: Region = WHOLE, fluid: np.ndarray | None = None) -> float:
    n = lattice_size(dg)
    return float(math.sqrt(cell_l2_squared(dg)[cell_mask(n, region, fluid)].sum()))


def relative_error(u_h: np.ndarray, u_ref: np.ndarray, region: Region = WHOLE,
                   fluid: np.ndarray | None = None) -> float:
    """|u_h - u_ref|_{H1 broken} / |u_ref|_{H1} over ``region``; NaN if undefined.

    Fields on different lattices are compared on the finer one; ``fluid``
    must then be given on that finer lattice.
    """
    n_h, n_r = lattice_size(u_h), lattice_size(u_ref)
    if n_r > n_h:
        u_h = prolong(u_h, n_r)
    elif n_h > n_r:
        u_ref = prolong(u_ref, n_h)
    denom = broken_h1(u_ref, region, fluid)
    if denom == 0.0:
        return float("nan")
    return broken_h1(u_h - u_ref, region, fluid) / denom


def prolong(dg: np.ndarray, n_to: int) -> np.ndarray:
    """Point-evaluate a broken field on the nested finer lattice ``n_to``."""
    n = lattice_size(dg)
    if n_to == n:
        return dg
    if n_to % n:
        raise ValueError(f"lattice {n_to} is not a refinement of {n}")
    cells = lattice_cells(n_to)
    i, j = np.meshgrid(np.arange(n_to + 1), np.arange(n_to + 1), indexing="xy")
    pts = np.stack([i.ravel() / n_to, j.ravel() / n_to], axis=1)
    bary = lattice_barycenters(n_to)
    parent = locate(bary, n)
    pc = lattice_cells(n, parent)
    ppts = np.stack([pc % (n + 1), pc // (n + 1)], axis=-1) / n  # (m, 3, 2)
    out = np.empty((len(cells), 3))
    for k in range(3):
        x = pts[cells[:, k]]
        lam = _barycentric(ppts, x)
        out[:, k] = (lam * dg[parent]).sum(axis=1)
    return out


def locate(pts: np.ndarray, n: int) -> np.ndarray:
    """Lattice cell containing each point (interior points; ties broken downward)."""
    s = np.clip(np.floor(pts * n).astype(np.int64), 0, n - 1)
    fx = pts[:, 0] * n - s[:, 0]
    fy = pts[:, 1] * n - s[:, 1]
    half = (fy > fx).astype(np.int64)
    return 2 * (s[:, 0] + n * s[:, 1]) + half


def _barycentric(tri: np.ndarray, x: np.ndarray) -> np.ndarray:
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    d1, d2, dx = v1 - v0, v2 - v0, x - v0
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    l1 = (dx[:, 0] * d2[:, 1] - dx[:, 1] * d2[:, 0]) / det
    l2 = (d1[:, 0] * dx[:, 1] - d1[:, 1] * dx[:, 0]) / det
    return np.stack([1 - l1 - l2, l1, l2], axis=1)


def error_split(u_h: np.ndarray, u_ref: np.ndarray, b, alpha: float,
                fluid: np.ndarray | None = None) -> dict:
    """Relative errors on the whole domain and inside/outside the layer."""
    inside = layer_region(b, alpha, "inside")
    out = {"e_whole": relative_error(u_h, u_ref, WHOLE, fluid), "delta": inside.delta,
           "peclet": inside.peclet, "layer_flag": inside.flagged}
    if inside.flagged:
        out["e_in"] = float("nan")
        out["e_out"] = out["e_whole"]
    else:
        out["e_in"] = relative_error(u_h, u_ref, inside, fluid)
        out["e_out"] = relative_error(u_h, u_ref, inside.complement(), fluid)
    return out
