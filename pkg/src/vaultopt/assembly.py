"""Load discretisation, member lengths and conic program assembly.

Per member k the program carries the triple x_k = (r_k, s_k, q_k) in the
rotated cone 2 r s >= q^2 and the cost c_r r + c_s s.  The equality
constraints are B1^T s = 0, B2^T s = 0 and D^T q = f over the free nodes.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import EmptyActiveSet, LoadOffNode, LoadOnSupport
from .geometry import Member, MemberArray, NodeGrid

AXIS_TOL = 1e-12


# --------------------------------------------------------------------------
# loads
# --------------------------------------------------------------------------

@dataclass
class LoadSpec:
    """Vertical loads, positive upward.

    point_loads: [(xy, P)]; line_loads: [(xy_start, xy_end, t)] with t per
    unit length; area_loads: [p] per unit area over the whole domain.
    """

    point_loads: list = field(default_factory=list)
    line_loads: list = field(default_factory=list)
    area_loads: list = field(default_factory=list)

    def scaled(self, lam: float) -> "LoadSpec":
        return LoadSpec([(x, lam * P) for x, P in self.point_loads],
                        [(a, b, lam * t) for a, b, t in self.line_loads],
                        [lam * p for p in self.area_loads])


def _node_lookup(grid: NodeGrid, pts: np.ndarray) -> np.ndarray:
    d, idx = cKDTree(grid.nodes).query(pts)
    bad = d > 1e-9 * grid.h
    if np.any(bad):
        raise LoadOffNode(f"load position {np.asarray(pts)[bad][0]} is not a grid node")
    return idx


def discretize_load(spec: LoadSpec, grid: NodeGrid) -> np.ndarray:
    """Nodal load vector over the free nodes.

    Area load p gives p h^2 per free node.  A line load of intensity t along
    a lattice line or lattice diagonal gives t times the node spacing along
    the line at each node on it, half of that at the segment ends.  Loads on
    supports are dropped.
    """
    h = grid.h
    F = np.zeros(grid.nbar)
    for p in spec.area_loads:
        F += p * h * h
    for a, b, t in spec.line_loads:
        a = np.asarray(a, float)
        b = np.asarray(b, float)
        d = b - a
        ad = np.abs(d)
        if min(ad) <= 1e-9 * h:
            step = h
        elif abs(ad[0] - ad[1]) <= 1e-9 * h:
            step = np.sqrt(2) * h
        else:
            raise LoadOffNode("line loads must follow lattice lines or diagonals")
        L = float(np.hypot(*d))
        nseg = L / step
        ns = int(round(nseg))
        if ns < 1 or abs(nseg - ns) > 1e-9 * max(1.0, nseg):
            raise LoadOffNode("line load ends are not grid nodes")
        pts = a + np.outer(np.arange(ns + 1) / ns, d)
        idx = _node_lookup(grid, pts)
        wgt = np.full(ns + 1, t * step)
        wgt[[0, -1]] *= 0.5
        np.add.at(F, idx, wgt)
    if spec.point_loads:
        pts = np.array([x for x, _ in spec.point_loads], float).reshape(-1, 2)
        idx = _node_lookup(grid, pts)
        for i, (_, P) in zip(idx, spec.point_loads):
            if grid.is_support[i] and P != 0:
                warnings.warn(f"point load on support node {i} dropped", LoadOnSupport)
            F[i] += P
    return F[grid.chi]


# --------------------------------------------------------------------------
# metric and lengths
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Metric:
    """Euclidean metric, or the slanted one induced by an affine z0."""

    grad_z0: tuple = (0.0, 0.0)

    @classmethod
    def euclidean(cls) -> "Metric":
        return cls()

    @classmethod
    def slanted(cls, grad) -> "Metric":
        return cls(tuple(float(v) for v in grad))

    @property
    def kind(self) -> str:
        return "euclidean" if self.grad_z0 == (0.0, 0.0) else "slanted"

    @property
    def matrix(self) -> np.ndarray:
        g = np.asarray(self.grad_z0, float)
        return np.eye(2) + np.outer(g, g)

    def slope_sq(self, cos1, cos2) -> np.ndarray:
        """(grad z0 . tau)^2 for unit directions tau."""
        g1, g2 = self.grad_z0
        return (g1 * np.asarray(cos1) + g2 * np.asarray(cos2)) ** 2


def member_length(member: Member | MemberArray, grid: NodeGrid, metric: Metric = Metric()):
    """Length of a member in the given metric."""
    dx = grid.nodes[member.i_plus] - grid.nodes[member.i_minus]
    return np.sqrt(np.einsum("...i,ij,...j->...", dx, metric.matrix, dx))


def cost_lengths(members: MemberArray, metric: Metric, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Perturbed (a, b) such that the member cost is 2 a r + b s.

    In the Euclidean case a = b = l - eps.  For a slanted support plane the
    s-weight grows to l (1 + (grad z0 . tau)^2) while r keeps the plan length,
    which keeps q = s Dw / (2 l) and hence exact 3D equilibrium at recovery.
    """
    l = members.length
    a = l - eps
    b = l * (1.0 + metric.slope_sq(members.cos1, members.cos2)) - eps
    return a, b


def archgrid_filter(members: MemberArray | Iterable[MemberArray]):
    """Keep members running along e1 or e2."""
    if isinstance(members, MemberArray):
        keep = (np.abs(members.cos1) <= AXIS_TOL) | (np.abs(members.cos2) <= AXIS_TOL)
        return members.take(keep)
    return (archgrid_filter(b) for b in members)


# --------------------------------------------------------------------------
# program
# --------------------------------------------------------------------------

@dataclass
class ConicProgram:
    """Standard form: min c.x  s.t.  A x = b,  x_k = (r, s, q)_k in K.

    Rows of A: n rows of B1^T s, n rows of B2^T s, n rows of D^T q.
    """

    grid: NodeGrid
    members: MemberArray
    f: np.ndarray
    metric: Metric
    eps_perturb: float
    a: np.ndarray
    b_len: np.ndarray
    B1: sp.csr_matrix
    B2: sp.csr_matrix
    D: sp.csr_matrix
    A: sp.csc_matrix

    @property
    def m(self) -> int:
        return len(self.members)

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def c(self) -> np.ndarray:
        c = np.zeros(3 * self.m)
        c[0::3] = 2 * self.a
        c[1::3] = self.b_len
        return c

    @property
    def rhs(self) -> np.ndarray:
        return np.concatenate([np.zeros(2 * self.n), self.f])


def geometric_matrices(grid: NodeGrid, members: MemberArray):
    """B1, B2, D (m x n): rows give (u+ - u-).tau and w+ - w- per member."""
    m, n = len(members), grid.n
    rows, cols, v1, v2, vd = [], [], [], [], []
    for node, sgn in ((members.i_minus, -1.0), (members.i_plus, 1.0)):
        d = grid.dof[node]
        ok = d >= 0
        rows.append(np.flatnonzero(ok))
        cols.append(d[ok])
        v1.append(sgn * members.cos1[ok])
        v2.append(sgn * members.cos2[ok])
        vd.append(np.full(ok.sum(), sgn))
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    mk = lambda v: sp.csr_matrix((np.concatenate(v), (r, c)), shape=(m, n))
    return mk(v1), mk(v2), mk(vd)


def assemble_program(grid: NodeGrid, members: MemberArray, f: np.ndarray,
                     metric: Metric = Metric(), eps_perturb: float = 0.0) -> ConicProgram:
    """Assemble the primal program over the given active members."""
    if len(members) == 0:
        raise EmptyActiveSet("no active members")
    f = np.asarray(f, float)
    if f.shape != (grid.n,):
        raise ValueError(f"load vector must have length {grid.n}")
    B1, B2, D = geometric_matrices(grid, members)
    m, n = len(members), grid.n
    blocks = []
    for j, (M, off) in enumerate(((B1, 1), (B2, 1), (D, 2))):
        C = M.tocoo()
        blocks.append((C.col + j * n, 3 * C.row + off, C.data))
    ri, ci, vv = (np.concatenate(x) for x in zip(*blocks))
    A = sp.csc_matrix((vv, (ri, ci)), shape=(3 * n, 3 * m))
    a, b = cost_lengths(members, metric, eps_perturb)
    return ConicProgram(grid, members, f, metric, eps_perturb, a, b, B1, B2, D, A)


def dual_ratio(members: MemberArray, grid: NodeGrid, u1, u2, w, metric: Metric,
               eps: float) -> np.ndarray:
    """Per-member ratio ((Dw)^2/(4a) + Bu) / b; the dual constraint reads <= 1."""
    U1 = np.zeros(grid.nbar)
    U2 = np.zeros(grid.nbar)
    W = np.zeros(grid.nbar)
    U1[grid.chi], U2[grid.chi], W[grid.chi] = u1, u2, w
    return _ratio_ext(members, U1, U2, W, metric, eps)


def _ratio_ext(members, U1, U2, W, metric, eps):
    i, j = members.i_minus, members.i_plus
    dw = W[j] - W[i]
    bu = (U1[j] - U1[i]) * members.cos1 + (U2[j] - U2[i]) * members.cos2
    a, b = cost_lengths(members, metric, eps)
    return (0.25 * dw * dw / a + bu) / b
