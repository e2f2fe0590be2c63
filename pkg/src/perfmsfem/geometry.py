"""Perforated domains built from periodic rectangle motifs.

The outer domain is always the unit square. A motif is a set of open,
axis-aligned rectangles in the unit cell; scaling it by ``epsilon`` and
repeating it periodically gives the perforations. Random thinning removes
whole cells using a counter-based hash of ``(seed, kx, ky)`` so the
geometry never depends on enumeration order.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

# Strict-inclusion tolerance: points within this distance of a rectangle
# side are treated as lying on it (hence fluid).
BOUNDARY_TOL = 1e-12

Rect = tuple[float, float, float, float]  # (x0, x1, y0, y1)


@dataclass(frozen=True)
class Motif:
    """Union of open rectangles ``(x0, x1, y0, y1)`` inside the unit cell."""

    rectangles: tuple[Rect, ...] = ()
    name: str = "custom"

    def __post_init__(self):
        rects = tuple(tuple(float(v) for v in r) for r in self.rectangles)
        object.__setattr__(self, "rectangles", rects)
        for x0, x1, y0, y1 in rects:
            if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
                raise ValueError(f"motif rectangle {(x0, x1, y0, y1)} not inside the unit cell")
        for i, a in enumerate(rects):
            for b in rects[i + 1:]:
                if _overlap(a, b) > 0.0:
                    raise ValueError(f"motif rectangles {a} and {b} overlap")

    @property
    def area(self) -> float:
        return sum((x1 - x0) * (y1 - y0) for x0, x1, y0, y1 in self.rectangles)

    @property
    def is_empty(self) -> bool:
        return not self.rectangles

    def strictly_interior(self) -> bool:
        """True when the closure of every rectangle avoids the cell boundary."""
        return all(0.0 < x0 and x1 < 1.0 and 0.0 < y0 and y1 < 1.0
                   for x0, x1, y0, y1 in self.rectangles)

    def contains(self, fx, fy) -> np.ndarray:
        """Vectorized strict membership for fractional cell coordinates."""
        fx = np.asarray(fx, dtype=float)
        fy = np.asarray(fy, dtype=float)
        inside = np.zeros(np.broadcast(fx, fy).shape, dtype=bool)
        for x0, x1, y0, y1 in self.rectangles:
            inside |= ((fx > x0 + BOUNDARY_TOL) & (fx < x1 - BOUNDARY_TOL)
                       & (fy > y0 + BOUNDARY_TOL) & (fy < y1 - BOUNDARY_TOL))
        return inside

    def key(self) -> str:
        return "motif[" + ";".join("%.17g,%.17g,%.17g,%.17g" % r for r in self.rectangles) + "]"


def _overlap(a: Rect, b: Rect) -> float:
    w = min(a[1], b[1]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[2], b[2])
    return max(w, 0.0) * max(h, 0.0)


O1 = Motif(((0.25, 0.75, 0.25, 0.75),), name="O1")
O2 = Motif(((0.0, 0.25, 0.25, 0.75), (0.75, 1.0, 0.25, 0.75)), name="O2")
EMPTY = Motif((), name="empty")


def scaled_o1(r: float) -> Motif:
    """The O1 square scaled by ``r`` about the cell centre."""
    if not 0.0 < r <= 1.0:
        raise ValueError("scaling factor r must lie in (0, 1]")
    half = 0.25 * r
    return Motif(((0.5 - half, 0.5 + half, 0.5 - half, 0.5 + half),), name=f"rO1({r:g})")


def motif_by_name(name: str) -> Motif:
    name = name.strip()
    if name == "O1":
        return O1
    if name == "O2":
        return O2
    if name in ("empty", "none"):
        return EMPTY
    if name.startswith("rO1(") and name.endswith(")"):
        return scaled_o1(float(name[4:-1]))
    raise ValueError(f"unknown motif {name!r}")


@dataclass(frozen=True)
class Periodic:
    motif: Motif

    def key(self) -> str:
        return "periodic:" + self.motif.key()


@dataclass(frozen=True)
class RandomThinned:
    """Periodic motif where each cell's copy is kept with ``keep_probability``."""

    motif: Motif
    keep_probability: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.keep_probability <= 1.0:
            raise ValueError("keep_probability must lie in [0, 1]")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def key(self) -> str:
        return "random:%s:%.17g:%d" % (self.motif.key(), self.keep_probability, self.seed)


PerforationPattern = Periodic | RandomThinned


def cell_uniform(seed: int, kx: int, ky: int) -> float:
    """Pseudorandom number in [0, 1) that depends only on (seed, kx, ky)."""
    payload = (int(seed).to_bytes(8, "little", signed=False)
               + int(kx).to_bytes(8, "little", signed=True)
               + int(ky).to_bytes(8, "little", signed=True))
    digest = hashlib.blake2b(payload, digest_size=8, person=b"perforate").digest()
    return int.from_bytes(digest, "little") / 2.0**64


@dataclass(frozen=True)
class DomainSpec:
    """Perforated unit square: period ``epsilon``, pattern and hole condition."""

    epsilon: float
    pattern: PerforationPattern = field(default_factory=lambda: Periodic(O1))
    perforation_bc: str = "dirichlet"

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in (0, 1]")
        if self.perforation_bc not in ("dirichlet", "neumann"):
            raise ValueError("perforation_bc must be 'dirichlet' or 'neumann'")

    @property
    def motif(self) -> Motif:
        return self.pattern.motif

    @property
    def n_cells(self) -> int:
        """Number of periodicity cells meeting [0, 1] along one axis."""
        return int(math.ceil(1.0 / self.epsilon - 1e-12))

    def key(self) -> str:
        return "eps=%.17g|%s|bc=%s" % (self.epsilon, self.pattern.key(), self.perforation_bc)

    def with_bc(self, bc: str) -> "DomainSpec":
        return DomainSpec(self.epsilon, self.pattern, bc)


@lru_cache(maxsize=64)
def kept_cells(spec: DomainSpec) -> np.ndarray:
    """Boolean array ``keep[kx, ky]`` over the cells meeting the unit square."""
    n = spec.n_cells
    pattern = spec.pattern
    if isinstance(pattern, Periodic) or pattern.keep_probability >= 1.0:
        keep = np.ones((n, n), dtype=bool)
    else:
        keep = np.empty((n, n), dtype=bool)
        for kx in range(n):
            for ky in range(n):
                keep[kx, ky] = cell_uniform(pattern.seed, kx, ky) < pattern.keep_probability
    keep.setflags(write=False)
    return keep


def fluid_indicator(x, y, spec: DomainSpec) -> np.ndarray | bool:
    """True where the point is not strictly inside a retained perforation.

    Accepts scalars or arrays; points on a perforation boundary are fluid.
    """
    scalar = np.isscalar(x) and np.isscalar(y)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    eps = spec.epsilon
    sx, sy = x / eps, y / eps
    kx, ky = np.floor(sx), np.floor(sy)
    solid = spec.motif.contains(sx - kx, sy - ky)
    if isinstance(spec.pattern, RandomThinned) and spec.pattern.keep_probability < 1.0:
        keep = kept_cells(spec)
        n = keep.shape[0]
        ix = np.clip(kx.astype(np.int64), 0, n - 1)
        iy = np.clip(ky.astype(np.int64), 0, n - 1)
        solid &= keep[ix, iy]
    fluid = ~solid
    return bool(fluid) if scalar else fluid


def perforation_rectangles(spec: DomainSpec,
                           window: Rect = (0.0, 1.0, 0.0, 1.0)) -> list[Rect]:
    """Retained perforations meeting ``window``, clipped to the unit square.

    Ordered lexicographically by cell index ``(kx, ky)``, then by motif order.
    """
    wx0, wx1, wy0, wy1 = window
    eps = spec.epsilon
    keep = kept_cells(spec)
    n = keep.shape[0]
    out: list[Rect] = []
    kx_lo = max(int(math.floor(wx0 / eps)) - 1, 0)
    kx_hi = min(int(math.ceil(wx1 / eps)) + 1, n)
    ky_lo = max(int(math.floor(wy0 / eps)) - 1, 0)
    ky_hi = min(int(math.ceil(wy1 / eps)) + 1, n)
    for kx in range(kx_lo, kx_hi):
        for ky in range(ky_lo, ky_hi):
            if not keep[kx, ky]:
                continue
            for x0, x1, y0, y1 in spec.motif.rectangles:
                r = (min(max(eps * (kx + x0), 0.0), 1.0), min(max(eps * (kx + x1), 0.0), 1.0),
                     min(max(eps * (ky + y0), 0.0), 1.0), min(max(eps * (ky + y1), 0.0), 1.0))
                if r[1] - r[0] <= 0.0 or r[3] - r[2] <= 0.0:
                    continue
                if _overlap(r, window) > 0.0:
                    out.append(r)
    return out


def porosity(motif: Motif) -> float:
    """Fluid fraction |Y \\ O| of the unit cell."""
    return 1.0 - motif.area


def points_in_rectangles(x, y, rects: Sequence[Rect]) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    inside = np.zeros(np.broadcast(x, y).shape, dtype=bool)
    for x0, x1, y0, y1 in rects:
        inside |= (x > x0 + BOUNDARY_TOL) & (x < x1 - BOUNDARY_TOL) & (y > y0 + BOUNDARY_TOL) & (y < y1 - BOUNDARY_TOL)
    return inside
