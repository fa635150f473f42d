"""Closed-form vaults and an independent full-ground-structure reference solve."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .assembly import Metric
from .geometry import NodeGrid, PolygonDomain, segments_in_closure

SQ5 = np.sqrt(5.0)


@dataclass
class AnalyticSolution:
    Z: float
    w: Callable                # dual deflection w~ at plan points (..., 2)
    z: Callable                # tension elevation w~/2
    fields: dict = field(default_factory=dict)


def analytic_disk_uniform(p: float = 1.0, R: float = 1.0, center=(0.0, 0.0)) -> AnalyticSolution:
    """Least-volume vault over a disk under uniform pressure p.

    Z = 2 pi p R^3 / sqrt 5.  Radial fields are functions of r.
    """
    if p <= 0 or R <= 0:
        raise ValueError("p and R must be positive")
    c = np.asarray(center, float)
    wr = lambda r: (2 * SQ5 / 3) * (R ** 3 - np.asarray(r) ** 3) / R ** 2
    rad = lambda x: np.linalg.norm(np.asarray(x, float) - c, axis=-1)
    fields = {
        "w_r": wr,
        "dw_r": lambda r: -2 * SQ5 * np.asarray(r) ** 2 / R ** 2,
        "sigma_rr": lambda r: p * R ** 2 / (2 * SQ5 * np.asarray(r)),
        "sigma_tt": lambda r: np.zeros_like(np.asarray(r, float)),   # purely radial stress
        "q_r": lambda r: -p * np.asarray(r) / 2,
        "u_r": lambda r: np.asarray(r) - np.asarray(r) ** 5 / R ** 4,
    }
    return AnalyticSolution(2 * np.pi * p * R ** 3 / SQ5,
                            lambda x: wr(rad(x)), lambda x: 0.5 * wr(rad(x)), fields)


def analytic_point_load(P: float = 1.0, x0=(0.0, 0.0), R: float = 1.0,
                        center=(0.0, 0.0)) -> AnalyticSolution:
    """Point load P at x0 inside a disk: Z = 2 P sqrt(R^2 - |x0|^2).

    w is the cone with apex 2 sqrt(R^2 - |x0|^2) at x0 vanishing on the circle.
    """
    x0 = np.asarray(x0, float) - np.asarray(center, float)
    d2 = R * R - x0 @ x0
    if d2 <= 0:
        raise ValueError("load point must lie inside the disk")
    H = 2 * np.sqrt(d2)

    def w(x):
        v = np.asarray(x, float) - np.asarray(center, float) - x0
        r = np.linalg.norm(v, axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            e = v / r[..., None]
        b = e @ x0
        rho = -b + np.sqrt(b * b + d2)          # ray from x0 to the circle
        out = H * (1.0 - r / rho)
        return np.where(r == 0, H, out)

    return AnalyticSolution(P * H, w, lambda x: 0.5 * w(x), {"apex": 0.5 * H})


def _full_pairs(grid: NodeGrid, domain: PolygonDomain | None):
    I, J = np.triu_indices(grid.nbar, 1)
    if domain is not None and not domain.is_convex:
        ok = segments_in_closure(domain, grid.nodes[I], grid.nodes[J])
        I, J = I[ok], J[ok]
    return I, J


def _matrices(grid, I, J):
    d = grid.nodes[J] - grid.nodes[I]
    l = np.hypot(d[:, 0], d[:, 1])
    c1, c2 = d[:, 0] / l, d[:, 1] / l
    m, n = len(I), grid.n
    rows, cols, vals = [], [], []
    for node, sg in ((I, -1.0), (J, 1.0)):
        dof = grid.dof[node]
        k = np.flatnonzero(dof >= 0)
        ii = dof[k]
        rows += [ii, n + ii, 2 * n + ii]
        cols += [3 * k + 1, 3 * k + 1, 3 * k + 2]
        vals += [sg * c1[k], sg * c2[k], np.full(len(k), sg)]
    A = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(3 * n, 3 * m))
    return A, l, c1, c2


def full_gs_reference_solve(grid: NodeGrid, domain: PolygonDomain | None, f,
                            metric: Metric = Metric(), tol: float = 1e-10,
                            return_details: bool = False):
    """Z over the fully materialised ground structure, solved in one shot by
    Clarabel with the rotated cones mapped to Lorentz cones.

    With ``return_details`` a dict carrying the dual displacements and the
    largest dual ratio over every member is returned as well.
    """
    import clarabel

    f = np.asarray(f, float)
    n = grid.n
    if n == 0 or not np.any(f):
        return (0.0, {"status": "trivial", "max_ratio": 0.0}) if return_details else 0.0
    I, J = _full_pairs(grid, domain)
    A, l, c1, c2 = _matrices(grid, I, J)
    m = len(I)
    g1, g2 = metric.grad_z0
    la, lb = l, l * (1.0 + (g1 * c1 + g2 * c2) ** 2)
    c = np.zeros(3 * m)
    c[0::3], c[1::3] = 2 * la, lb
    T = np.array([[1.0, 1.0, 0.0], [1.0, -1.0, 0.0], [0.0, 0.0, np.sqrt(2.0)]]) / np.sqrt(2.0)
    G = sp.vstack([A, sp.kron(sp.identity(m), -T)]).tocsc()
    rhs = np.concatenate([np.zeros(2 * n), f, np.zeros(3 * m)])
    cones = [clarabel.ZeroConeT(3 * n)] + [clarabel.SecondOrderConeT(3)] * m
    st = clarabel.DefaultSettings()
    st.verbose = False
    st.tol_gap_abs = st.tol_gap_rel = st.tol_feas = tol
    res = clarabel.DefaultSolver(sp.csc_matrix((3 * m, 3 * m)), c, G, rhs, cones, st).solve()
    status = str(res.status)
    if "Solved" not in status:
        raise RuntimeError(f"reference solve failed: {status}")
    Z = float(res.obj_val)
    if not return_details:
        return Z
    y = -np.asarray(res.z[:3 * n])
    W = np.zeros(grid.nbar)
    U1, U2 = W.copy(), W.copy()
    U1[grid.chi], U2[grid.chi], W[grid.chi] = y[:n], y[n:2 * n], y[2 * n:]
    dw = W[J] - W[I]
    bu = (U1[J] - U1[I]) * c1 + (U2[J] - U2[I]) * c2
    ratio = (0.25 * dw * dw / la + bu) / lb
    x = np.asarray(res.x).reshape(-1, 3)
    return Z, {"status": status, "max_ratio": float(ratio.max()), "u1": y[:n], "u2": y[n:2 * n],
               "w": y[2 * n:], "s": x[:, 1], "members": m}
