"""Grid-shell recovery from a conic solution.

Tension shells take z = w/2 (+ z0), compression shells z = -w/2 (+ z0); in
both cases the axial forces are the plane forces times the tangential
Jacobian J_k = sqrt(1 + Delta_k(z)^2), Delta_k(z) = (Dz)_k / l_k.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .assembly import ConicProgram, Metric
from .errors import DegenerateDesign
from .geometry import MemberArray, NodeGrid
from .socp import SocpSolution

DROP = 1e-8


def _extend(grid: NodeGrid, v) -> np.ndarray:
    out = np.zeros(grid.nbar)
    out[grid.chi] = v
    return out


def _sign(mode: str) -> float:
    if mode not in ("tension", "compression"):
        raise ValueError(f"mode must be 'tension' or 'compression', got {mode!r}")
    return 1.0 if mode == "tension" else -1.0


def support_elevation(grid: NodeGrid, metric: Metric, offset: float = 0.0) -> np.ndarray:
    """z0 at every node: g . x + offset (zero for the Euclidean metric)."""
    return grid.nodes @ np.asarray(metric.grad_z0, float) + offset


@dataclass
class GridShell:
    grid: NodeGrid
    z: np.ndarray              # elevation per node, supports at z0
    members: MemberArray       # retained members
    s_hat: np.ndarray          # signed axial force
    area: np.ndarray           # cross-section; |s_hat| at unit yield stress for plastic
    length3d: np.ndarray
    plan_length: np.ndarray
    mode: str
    design: str                # "plastic" or "elastic"
    Z: float
    V0: float | None = None
    E0: float | None = None
    info: dict = field(default_factory=dict)

    @property
    def nodes3d(self) -> np.ndarray:
        return np.column_stack([self.grid.nodes, self.z])

    @property
    def volume(self) -> float:
        return float(self.area @ self.length3d)

    @property
    def max_elevation(self) -> float:
        return float(np.max(np.abs(self.z))) if len(self.z) else 0.0


@dataclass
class ElasticState:
    u1: np.ndarray
    u2: np.ndarray
    w: np.ndarray
    strain: np.ndarray         # per retained member


def _shell(sol: SocpSolution, prog: ConicProgram, mode: str, drop: float, offset: float):
    sg = _sign(mode)
    grid = prog.grid
    z = sg * 0.5 * _extend(grid, sol.w) + support_elevation(grid, prog.metric, offset)
    smax = float(np.max(sol.s)) if len(sol.s) else 0.0
    keep = sol.s >= drop * smax if smax > 0 else np.zeros(len(sol.s), bool)
    mem = prog.members.take(keep)
    l = mem.length
    dz = (z[mem.i_plus] - z[mem.i_minus]) / l
    J = np.sqrt(1.0 + dz * dz)
    s_hat = sg * J * sol.s[keep]
    return grid, z, mem, s_hat, J * l, l


def recover_plastic(sol: SocpSolution, prog: ConicProgram, mode: str = "compression",
                    drop: float = DROP, z0_offset: float = 0.0) -> GridShell:
    """Least-volume grid-shell; members with s below ``drop`` max s are omitted."""
    grid, z, mem, s_hat, l3, l = _shell(sol, prog, mode, drop, z0_offset)
    return GridShell(grid, z, mem, s_hat, np.abs(s_hat), l3, l, mode, "plastic", sol.objective)


def recover_elastic(sol: SocpSolution, prog: ConicProgram, V0: float, E0: float,
                    mode: str = "compression", drop: float = DROP, z0_offset: float = 0.0,
                    tol: float = 1e-12):
    """Least-compliance grid-shell of volume V0 and its displacements.

    Areas are (V0 / Z) J s, displacements Z / (E0 V0) times (u1, u2, w) in
    tension and (-u1, -u2, w) in compression.
    """
    if V0 <= 0 or E0 <= 0:
        raise ValueError("V0 and E0 must be positive")
    Z = sol.objective
    if not Z > tol:
        raise DegenerateDesign(f"objective {Z:.3e}: the load needs no material")
    sg = _sign(mode)
    grid, z, mem, s_hat, l3, l = _shell(sol, prog, mode, drop, z0_offset)
    area = (V0 / Z) * np.abs(s_hat)
    gs = GridShell(grid, z, mem, s_hat, area, l3, l, mode, "elastic", Z, V0, E0)
    c = Z / (E0 * V0)
    state = ElasticState(sg * c * sol.u1, sg * c * sol.u2, c * sol.w, np.zeros(0))
    state.strain = axial_strain(gs, state.u1, state.u2, state.w)
    return gs, state


def axial_strain(gs: GridShell, u1, u2, w) -> np.ndarray:
    """(e_k + Delta_k(z) Delta_k(w)) / (1 + Delta_k(z)^2) per retained member."""
    m, grid = gs.members, gs.grid
    U1, U2, W = _extend(grid, u1), _extend(grid, u2), _extend(grid, w)
    i, j = m.i_minus, m.i_plus
    l = gs.plan_length
    e = ((U1[j] - U1[i]) * m.cos1 + (U2[j] - U2[i]) * m.cos2) / l
    dz = (gs.z[j] - gs.z[i]) / l
    return (e + dz * (W[j] - W[i]) / l) / (1.0 + dz * dz)


def nodal_force_residual(gs: GridShell, f) -> np.ndarray:
    """3D out-of-balance force per non-support node (rows follow grid.chi)."""
    grid, m = gs.grid, gs.members
    F = np.zeros((grid.nbar, 3))
    if len(m):
        d = gs.nodes3d[m.i_plus] - gs.nodes3d[m.i_minus]
        t = d / gs.length3d[:, None]
        np.add.at(F, m.i_minus, gs.s_hat[:, None] * t)
        np.add.at(F, m.i_plus, -gs.s_hat[:, None] * t)
    F[grid.chi, 2] += f
    return F[grid.chi]


def grid_shell_equilibrium_residual(gs: GridShell, f) -> float:
    """Max nodal residual norm over free nodes, divided by 1 + |f|_inf."""
    f = np.asarray(f, float)
    R = nodal_force_residual(gs, f)
    if R.size == 0:
        return 0.0
    return float(np.max(np.linalg.norm(R, axis=1))) / (1.0 + float(np.max(np.abs(f), initial=0.0)))


def compliance(gs: GridShell, state: ElasticState, f) -> tuple[float, float]:
    """Compliance by the displacement formula and by the stress formula.

    f.w_el - E0/2 sum (e)_+^2 a l3   (e)_- in compression
    1/(2 E0) sum s_hat^2 / a l3      over members with a > 0
    """
    if gs.design != "elastic":
        raise ValueError("compliance needs an elastic design")
    E0 = gs.E0
    e = state.strain
    e = np.maximum(e, 0.0) if gs.mode == "tension" else np.minimum(e, 0.0)
    primal = float(np.asarray(f) @ state.w) - 0.5 * E0 * float(np.sum(e * e * gs.area * gs.length3d))
    on = gs.area > 0
    dual = float(np.sum(gs.s_hat[on] ** 2 / gs.area[on] * gs.length3d[on])) / (2 * E0)
    return primal, dual


def volume_functional(sol: SocpSolution, prog: ConicProgram, mode: str = "compression",
                      z0_offset: float = 0.0) -> float:
    """sum_k l_k s_k (1 + Delta_k(z)^2) on the recovered elevation (equals Z at optimum)."""
    z = _sign(mode) * 0.5 * _extend(prog.grid, sol.w) + support_elevation(prog.grid, prog.metric, z0_offset)
    m = prog.members
    l = m.length
    dz = (z[m.i_plus] - z[m.i_minus]) / l
    return float(np.sum(l * sol.s * (1.0 + dz * dz)))


def colinearity_check(sol: SocpSolution, prog: ConicProgram, tol_c: float = 1e-5,
                      s_threshold: float = 1e-6) -> list[tuple[int, int]]:
    """(member id, node) pairs where an active member passes over a node at
    which the slope of w breaks.

    For x1, x3 the member ends and x2 a grid node inside the segment, the
    slopes (w2 - w1)/|x2 - x1| and (w3 - w2)/|x3 - x2| must agree within
    tol_c (1 + max slope).
    """
    grid = prog.grid
    smax = float(np.max(sol.s)) if len(sol.s) else 0.0
    if smax <= 0:
        return []
    act = np.flatnonzero(sol.s > s_threshold * smax)
    W = _extend(grid, sol.w)
    X = grid.nodes
    tree = cKDTree(X)
    m = prog.members
    tol_d = 1e-9 * grid.h
    out = []
    for k in act:
        i, j = m.i_minus[k], m.i_plus[k]
        p, q = X[i], X[j]
        L = float(np.hypot(*(q - p)))
        if L <= grid.h * (1 + 1e-9):
            continue
        cand = np.array(tree.query_ball_point(0.5 * (p + q), 0.5 * L - 0.5 * grid.h + tol_d), dtype=int)
        cand = cand[(cand != i) & (cand != j)]
        if len(cand) == 0:
            continue
        d = X[cand] - p
        tau = (q - p) / L
        along = d @ tau
        off = np.abs(d[:, 0] * tau[1] - d[:, 1] * tau[0])
        on = (off <= tol_d) & (along > tol_d) & (along < L - tol_d)
        for c, t in zip(cand[on], along[on]):
            g1 = (W[c] - W[i]) / t
            g2 = (W[j] - W[c]) / (L - t)
            if abs(g1 - g2) > tol_c * (1.0 + max(abs(g1), abs(g2))):
                out.append((int(prog.members.k[k]), int(c)))
    return out
