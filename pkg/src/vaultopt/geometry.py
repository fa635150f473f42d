"""Plane nodal grids over polygonal domains and their ground structures.

The full ground structure over ``nbar`` nodes holds ``nbar*(nbar-1)/2``
members.  Member ``k`` joins nodes ``i < j`` where ``k`` is the rank of the
pair in lexicographic order, so the full set never has to be stored: it is
streamed in contiguous id ranges.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .errors import GridInfeasible, SupportHullViolation

CHUNK = 1 << 20


# --------------------------------------------------------------------------
# domain
# --------------------------------------------------------------------------

def _ring_array(ring) -> np.ndarray:
    r = np.asarray(ring, dtype=float).reshape(-1, 2)
    if len(r) > 1 and np.allclose(r[0], r[-1]):
        r = r[:-1]
    if len(r) < 3:
        raise ValueError("a ring needs at least three vertices")
    return r


def _signed_area(r: np.ndarray) -> float:
    x, y = r[:, 0], r[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


@dataclass(frozen=True)
class PolygonDomain:
    """Closed polygonal domain: one outer ring and optional holes."""

    outer_ring: np.ndarray
    holes: tuple = ()

    def __post_init__(self):
        outer = _ring_array(self.outer_ring)
        holes = tuple(_ring_array(h) for h in self.holes)
        object.__setattr__(self, "outer_ring", outer)
        object.__setattr__(self, "holes", holes)
        if self.area <= 0:
            raise ValueError("domain area must be positive")

    @classmethod
    def rectangle(cls, a: float = 1.0, b: float | None = None) -> "PolygonDomain":
        b = a if b is None else b
        return cls(np.array([[0, 0], [a, 0], [a, b], [0, b]], dtype=float))

    @classmethod
    def regular_polygon(cls, R: float, N: int, center=(0.0, 0.0),
                        circumscribed: bool = True) -> "PolygonDomain":
        """N-gon approximating the disk of radius R.

        With ``circumscribed`` the edges are tangent to the circle, otherwise
        the vertices lie on it.
        """
        rho = R / np.cos(np.pi / N) if circumscribed else R
        th = 2 * np.pi * (np.arange(N) + 0.5) / N if circumscribed else 2 * np.pi * np.arange(N) / N
        pts = np.c_[rho * np.cos(th), rho * np.sin(th)] + np.asarray(center, float)
        return cls(pts)

    @property
    def rings(self) -> list[np.ndarray]:
        return [self.outer_ring, *self.holes]

    @property
    def area(self) -> float:
        return abs(_signed_area(self.outer_ring)) - sum(abs(_signed_area(h)) for h in self.holes)

    @property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Start and end points of all boundary edges, shape (E, 2) each."""
        a = np.vstack(self.rings)
        b = np.vstack([np.roll(r, -1, axis=0) for r in self.rings])
        return a, b

    @property
    def diameter(self) -> float:
        v = self.outer_ring
        return float(np.max(np.linalg.norm(v[:, None, :] - v[None, :, :], axis=2)))

    @property
    def is_convex(self) -> bool:
        if self.holes:
            return False
        r = self.outer_ring
        d1 = np.roll(r, -1, axis=0) - r
        d2 = np.roll(d1, -1, axis=0)
        cr = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        tol = 1e-12 * self.diameter ** 2
        return bool(np.all(cr >= -tol) or np.all(cr <= tol))

    def boundary_distance(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        out = np.full(len(pts), np.inf)
        a, b = self.edges
        for j in range(len(a)):
            e = b[j] - a[j]
            t = np.clip(((pts - a[j]) @ e) / (e @ e), 0.0, 1.0)
            out = np.minimum(out, np.linalg.norm(pts - a[j] - t[:, None] * e, axis=1))
        return out

    def _crossings(self, pts: np.ndarray) -> np.ndarray:
        """Even-odd ray crossing parity over every ring."""
        inside = np.zeros(len(pts), dtype=bool)
        a, b = self.edges
        x, y = pts[:, 0], pts[:, 1]
        for j in range(len(a)):
            (x1, y1), (x2, y2) = a[j], b[j]
            if y1 == y2:
                continue
            straddle = (y1 > y) != (y2 > y)
            xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            inside ^= straddle & (x < xint)
        return inside

    def contains(self, pts, tol: float = 0.0) -> np.ndarray:
        """Membership in the closure, boundary band of width ``tol`` included."""
        pts = np.atleast_2d(np.asarray(pts, float))
        res = self._crossings(pts)
        if tol > 0:
            res |= self.boundary_distance(pts) <= tol
        return res


# --------------------------------------------------------------------------
# segment containment
# --------------------------------------------------------------------------

def segments_in_closure(domain: PolygonDomain, p: np.ndarray, q: np.ndarray,
                        tol: float | None = None) -> np.ndarray:
    """Vectorised test whether segments [p_i, q_i] lie in the domain closure.

    Each segment is cut at its intersections with the boundary edges; it lies
    in the closure iff the midpoint of every piece does.  Pieces running along
    an edge have their midpoint on the boundary and are accepted.
    """
    p = np.atleast_2d(np.asarray(p, float))
    q = np.atleast_2d(np.asarray(q, float))
    if tol is None:
        tol = 1e-12 * domain.diameter
    a, b = domain.edges
    d = q - p                                   # (S, 2)
    e = b - a                                   # (E, 2)
    ap = a[None, :, :] - p[:, None, :]          # (S, E, 2)
    den = d[:, None, 0] * e[None, :, 1] - d[:, None, 1] * e[None, :, 0]
    num_t = ap[..., 0] * e[None, :, 1] - ap[..., 1] * e[None, :, 0]
    num_s = ap[..., 0] * d[:, None, 1] - ap[..., 1] * d[:, None, 0]
    scale = np.linalg.norm(d, axis=1)[:, None] * np.linalg.norm(e, axis=1)[None, :]
    ok = np.abs(den) > 1e-14 * scale
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(ok, num_t / den, np.nan)
        s = np.where(ok, num_s / den, np.nan)
    stol = 1e-12
    hit = ok & (s >= -stol) & (s <= 1 + stol) & (t > 0) & (t < 1)
    t = np.where(hit, t, np.nan)
    S, E = t.shape
    ts = np.sort(np.concatenate([np.zeros((S, 1)), t, np.ones((S, 1))], axis=1), axis=1)
    # NaNs sort last: the pieces after the final 1.0 are ignored
    mid = 0.5 * (ts[:, :-1] + ts[:, 1:])
    valid = ~np.isnan(mid) & (ts[:, 1:] - ts[:, :-1] > 0)
    pts = p[:, None, :] + mid[..., None] * d[:, None, :]
    inside = np.ones((S, E + 1), dtype=bool)
    inside[valid] = domain.contains(pts[valid], tol=tol)
    return inside.all(axis=1)


def segment_in_closure(domain: PolygonDomain, p, q) -> bool:
    """True iff the segment [p, q] is contained in the closure of the domain."""
    return bool(segments_in_closure(domain, np.asarray(p, float)[None], np.asarray(q, float)[None])[0])


# --------------------------------------------------------------------------
# grid
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NodeGrid:
    """Finite plane node set with boundary and support flags.

    ``chi`` lists the non-support nodes in DOF order; ``dof`` is its inverse
    (-1 on supports).
    """

    nodes: np.ndarray
    is_boundary: np.ndarray
    is_support: np.ndarray
    h: float
    chi: np.ndarray = field(init=False)
    dof: np.ndarray = field(init=False)

    def __post_init__(self):
        sup = np.asarray(self.is_support, dtype=bool)
        object.__setattr__(self, "is_support", sup)
        object.__setattr__(self, "is_boundary", np.asarray(self.is_boundary, dtype=bool))
        chi = np.flatnonzero(~sup)
        dof = np.full(len(self.nodes), -1, dtype=np.int64)
        dof[chi] = np.arange(len(chi))
        object.__setattr__(self, "chi", chi)
        object.__setattr__(self, "dof", dof)

    @property
    def nbar(self) -> int:
        return len(self.nodes)

    @property
    def n(self) -> int:
        return len(self.chi)

    @property
    def full_count(self) -> int:
        nb = self.nbar
        return nb * (nb - 1) // 2


def _hull_equations(points: np.ndarray):
    if len(points) < 3:
        return None
    try:
        return ConvexHull(points).equations
    except QhullError:
        return None


def check_hull(grid: NodeGrid, strict: bool = True) -> bool:
    """Every non-support node lies in the (interior of the) hull of supports."""
    eq = _hull_equations(grid.nodes[grid.is_support])
    if eq is None:
        return False
    free = grid.nodes[~grid.is_support]
    if len(free) == 0:
        return True
    val = free @ eq[:, :2].T + eq[:, 2]
    tol = 1e-9 * grid.h
    return bool(np.all(val < -tol) if strict else np.all(val <= tol))


def _arc_positions(ring: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Arc-length position of boundary points along ``ring``."""
    a = ring
    b = np.roll(ring, -1, axis=0)
    e = b - a
    L = np.linalg.norm(e, axis=1)
    start = np.concatenate([[0.0], np.cumsum(L)[:-1]])
    best = np.full(len(pts), np.inf)
    pos = np.zeros(len(pts))
    for j in range(len(a)):
        t = np.clip(((pts - a[j]) @ e[j]) / (L[j] ** 2), 0.0, 1.0)
        dist = np.linalg.norm(pts - a[j] - t[:, None] * e[j], axis=1)
        better = dist < best - 1e-15
        best = np.where(better, dist, best)
        pos = np.where(better, start[j] + t * L[j], pos)
    return pos


def _ring_lattice_points(ring: np.ndarray, h: float) -> np.ndarray:
    """Vertices plus isolated intersections of lattice lines with the ring."""
    out = [ring]
    b = np.roll(ring, -1, axis=0)
    for (x1, y1), (x2, y2) in zip(ring, b):
        for ax, (c1, c2, o1, o2) in enumerate(((x1, x2, y1, y2), (y1, y2, x1, x2))):
            if c1 == c2:
                continue  # edge lies on a lattice-parallel line: only its ends count
            lo, hi = min(c1, c2), max(c1, c2)
            js = np.arange(np.ceil(lo / h - 1e-9), np.floor(hi / h + 1e-9) + 1)
            c = js * h
            c = c[(c >= lo) & (c <= hi)]
            if len(c) == 0:
                continue
            t = (c - c1) / (c2 - c1)
            o = o1 + t * (o2 - o1)
            out.append(np.c_[c, o] if ax == 0 else np.c_[o, c])
    return np.vstack(out)


def build_grid(domain: PolygonDomain, h: float) -> NodeGrid:
    """Regular grid: lattice nodes inside the domain plus boundary nodes.

    Boundary nodes are the polygon vertices and the points where lattice lines
    cross the boundary.  Interior nodes come first in row-major order by
    (x2, x1), then boundary nodes ring by ring in arc order.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    tol = 1e-9 * h
    lo = domain.outer_ring.min(axis=0)
    hi = domain.outer_ring.max(axis=0)
    j1 = np.arange(np.ceil(lo[0] / h - 1e-9), np.floor(hi[0] / h + 1e-9) + 1)
    j2 = np.arange(np.ceil(lo[1] / h - 1e-9), np.floor(hi[1] / h + 1e-9) + 1)
    J1, J2 = np.meshgrid(j1, j2)               # rows follow x2
    lat = np.c_[J1.ravel() * h, J2.ravel() * h]
    keep = domain._crossings(lat) & (domain.boundary_distance(lat) > tol)
    interior = lat[keep]

    bnd = []
    for ring in domain.rings:
        pts = _ring_lattice_points(ring, h)
        pos = _arc_positions(ring, pts)
        order = np.argsort(pos, kind="stable")
        pts, pos = pts[order], pos[order]
        sel = [0]
        for i in range(1, len(pts)):
            if np.linalg.norm(pts[i] - pts[sel[-1]]) > tol:
                sel.append(i)
        if len(sel) > 1 and np.linalg.norm(pts[sel[-1]] - pts[sel[0]]) <= tol:
            sel.pop()
        bnd.append(pts[sel])
    bnd = np.vstack(bnd)
    nodes = np.vstack([interior, bnd])
    is_b = np.r_[np.zeros(len(interior), bool), np.ones(len(bnd), bool)]
    grid = NodeGrid(nodes, is_b, is_b.copy(), float(h))
    if grid.n == 0:
        raise GridInfeasible("grid has no interior nodes")
    if not check_hull(grid, strict=True):
        raise GridInfeasible("a free node is not interior to the hull of the supports")
    return grid


def set_supports(grid: NodeGrid, support_nodes: Sequence[int]) -> NodeGrid:
    """Replace the support set; the closure must lie in the hull of supports."""
    idx = np.unique(np.asarray(support_nodes, dtype=np.int64))
    if len(idx) == 0:
        raise SupportHullViolation("support set is empty")
    sup = np.zeros(grid.nbar, dtype=bool)
    sup[idx] = True
    g = NodeGrid(grid.nodes, grid.is_boundary, sup, grid.h)
    if not check_hull(g, strict=False):
        raise SupportHullViolation("domain closure is not inside the hull of the supports")
    return g


# --------------------------------------------------------------------------
# members
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Member:
    k: int
    i_minus: int
    i_plus: int
    length: float
    cos1: float
    cos2: float


@dataclass(frozen=True)
class MemberArray:
    """Columnar block of members, all arrays aligned by position."""

    k: np.ndarray
    i_minus: np.ndarray
    i_plus: np.ndarray
    length: np.ndarray
    cos1: np.ndarray
    cos2: np.ndarray

    def __len__(self) -> int:
        return len(self.k)

    def __iter__(self) -> Iterator[Member]:
        for t in zip(self.k, self.i_minus, self.i_plus, self.length, self.cos1, self.cos2):
            yield Member(int(t[0]), int(t[1]), int(t[2]), float(t[3]), float(t[4]), float(t[5]))

    def take(self, sel) -> "MemberArray":
        return MemberArray(self.k[sel], self.i_minus[sel], self.i_plus[sel],
                           self.length[sel], self.cos1[sel], self.cos2[sel])

    @classmethod
    def concat(cls, blocks: Sequence["MemberArray"]) -> "MemberArray":
        blocks = list(blocks)
        if not blocks:
            return cls.empty()
        return cls(*(np.concatenate([getattr(b, f) for b in blocks])
                     for f in ("k", "i_minus", "i_plus", "length", "cos1", "cos2")))

    @classmethod
    def empty(cls) -> "MemberArray":
        z = np.zeros(0)
        zi = np.zeros(0, dtype=np.int64)
        return cls(zi, zi, zi, z, z, z)


def pair_rank(i, j, nbar: int):
    """Lexicographic rank of the pair (i, j), i < j, among all node pairs."""
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    return i * nbar - i * (i + 1) // 2 + (j - i - 1)


def pair_unrank(k, nbar: int) -> tuple[np.ndarray, np.ndarray]:
    k = np.asarray(k, dtype=np.int64)
    ii = np.arange(nbar, dtype=np.int64)
    start = ii * nbar - ii * (ii + 1) // 2
    i = np.searchsorted(start, k, side="right") - 1
    j = k - start[i] + i + 1
    return i, j


def make_members(grid: NodeGrid, i, j, k=None) -> MemberArray:
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    if k is None:
        k = pair_rank(i, j, grid.nbar)
    d = grid.nodes[j] - grid.nodes[i]
    L = np.hypot(d[:, 0], d[:, 1])
    return MemberArray(np.asarray(k, dtype=np.int64), i, j, L, d[:, 0] / L, d[:, 1] / L)


def enumerate_full_members(grid: NodeGrid, domain: PolygonDomain | None = None,
                           chunk: int = CHUNK, start: int = 0,
                           stop: int | None = None) -> Iterator[MemberArray]:
    """Stream the full ground structure in blocks of consecutive member ids.

    For nonconvex domains pairs whose segment leaves the closure are skipped.
    ``start``/``stop`` restrict the id range, so disjoint ranges can be
    consumed independently.
    """
    m = grid.full_count
    stop = m if stop is None else min(stop, m)
    check = domain is not None and not domain.is_convex
    for k0 in range(start, stop, chunk):
        k = np.arange(k0, min(k0 + chunk, stop), dtype=np.int64)
        i, j = pair_unrank(k, grid.nbar)
        block = make_members(grid, i, j, k)
        if check:
            block = block.take(_closure_mask(grid, domain, i, j))
        yield block


def _closure_mask(grid, domain, i, j, sub: int = 1 << 15) -> np.ndarray:
    out = np.empty(len(i), dtype=bool)
    for a in range(0, len(i), sub):
        sl = slice(a, a + sub)
        out[sl] = segments_in_closure(domain, grid.nodes[i[sl]], grid.nodes[j[sl]])
    return out


def neighbor_members(grid: NodeGrid, domain: PolygonDomain | None = None) -> MemberArray:
    """Members joining nodes at Chebyshev distance at most h."""
    tree = cKDTree(grid.nodes)
    pairs = tree.query_pairs(grid.h * (1 + 1e-9), p=np.inf, output_type="ndarray")
    if len(pairs) == 0:
        return MemberArray.empty()
    i = pairs.min(axis=1).astype(np.int64)
    j = pairs.max(axis=1).astype(np.int64)
    k = pair_rank(i, j, grid.nbar)
    order = np.argsort(k)
    i, j, k = i[order], j[order], k[order]
    if domain is not None and not domain.is_convex:
        keep = _closure_mask(grid, domain, i, j)
        i, j, k = i[keep], j[keep], k[keep]
    return make_members(grid, i, j, k)


def members_from_ids(grid: NodeGrid, ids) -> MemberArray:
    ids = np.sort(np.asarray(ids, dtype=np.int64))
    i, j = pair_unrank(ids, grid.nbar)
    return make_members(grid, i, j, ids)
