"""Interior-point solver for programs over products of 3-dim rotated cones.

Homogeneous self-dual embedding, Nesterov-Todd scaling and Mehrotra
predictor-corrector steps.  Rotated triples are mapped to standard Lorentz
cones by the symmetric involution ``T``; the normal equations
A W^2 A^T dy = rhs are factored by a sparse Cholesky (CHOLMOD via cvxopt)
whose symbolic analysis is done once per program.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .assembly import ConicProgram
from .errors import NumericalFailure

log = logging.getLogger(__name__)

SQ2 = np.sqrt(2.0)
T = np.array([[1.0, 1.0, 0.0], [1.0, -1.0, 0.0], [0.0, 0.0, SQ2]]) / SQ2
JD = np.array([1.0, -1.0, -1.0])


# --------------------------------------------------------------------------
# cone helpers (arrays of shape (m, 3), Lorentz coordinates unless noted)
# --------------------------------------------------------------------------

def in_rotated_cone(t, tol: float = 0.0) -> np.ndarray:
    """Membership of rows (t1, t2, t3) in {t1, t2 >= 0, 2 t1 t2 >= t3^2}."""
    t = np.asarray(t, float).reshape(-1, 3)
    return (t[:, 0] >= -tol) & (t[:, 1] >= -tol) & (2 * t[:, 0] * t[:, 1] - t[:, 2] ** 2 >= -tol)


def rotated_cone_violation(t) -> np.ndarray:
    """Euclidean distance of each rotated triple to the cone."""
    y = np.asarray(t, float).reshape(-1, 3) @ T
    nrm = np.hypot(y[:, 1], y[:, 2])
    out = np.zeros(len(y))
    below = nrm <= -y[:, 0]
    out[below] = np.linalg.norm(y[below], axis=1)
    mid = (nrm > np.abs(y[:, 0])) & ~below
    out[mid] = (nrm[mid] - y[mid, 0]) / SQ2
    return out


def _jdot(u, v):
    return u[:, 0] * v[:, 0] - u[:, 1] * v[:, 1] - u[:, 2] * v[:, 2]


def _jnorm(u):
    """sqrt(u^T J u) for interior u, free of cancellation."""
    nb = np.hypot(u[:, 1], u[:, 2])
    return np.sqrt(np.maximum((u[:, 0] - nb) * (u[:, 0] + nb), 0.0))


def _jprod(u, v):
    """Jordan product u o v."""
    out = np.empty_like(u)
    out[:, 0] = np.einsum("ij,ij->i", u, v)
    out[:, 1:] = u[:, :1] * v[:, 1:] + v[:, :1] * u[:, 1:]
    return out


def _jsolve(lam, r):
    """Solve lam o v = r for v."""
    l0 = lam[:, 0]
    lb = lam[:, 1:]
    det = l0 * l0 - np.einsum("ij,ij->i", lb, lb)
    v = np.empty_like(r)
    v[:, 0] = (l0 * r[:, 0] - np.einsum("ij,ij->i", lb, r[:, 1:])) / det
    v[:, 1:] = (r[:, 1:] - v[:, :1] * lb) / l0[:, None]
    return v


@dataclass
class NTScaling:
    beta: np.ndarray
    v: np.ndarray           # unit hyperbolic vector, v^T J v = 1

    @classmethod
    def compute(cls, x, z) -> "NTScaling":
        xn = _jnorm(x)
        zn = _jnorm(z)
        xb = x / xn[:, None]
        zb = z / zn[:, None]
        gam = np.sqrt(0.5 * (1.0 + np.einsum("ij,ij->i", xb, zb)))
        wb = (xb + zb * JD) / (2 * gam[:, None])
        v = wb.copy()
        v[:, 0] += 1.0
        v /= np.sqrt(2.0 * (wb[:, 0] + 1.0))[:, None]
        return cls(np.sqrt(xn / zn), v)

    def W(self, u):
        """W u with W = beta (2 v v^T - J)."""
        return self.beta[:, None] * (2 * np.einsum("ij,ij->i", self.v, u)[:, None] * self.v - JD * u)

    def Winv(self, u):
        jv = JD * self.v
        return (2 * np.einsum("ij,ij->i", jv, u)[:, None] * jv - JD * u) / self.beta[:, None]

    def H(self):
        """Blocks of W^2, shape (m, 3, 3)."""
        v = self.v
        Wm = 2 * v[:, :, None] * v[:, None, :] - np.diag(JD)[None]
        return (self.beta ** 2)[:, None, None] * (Wm @ Wm)


def _max_step(x, d):
    """Largest alpha >= 0 with x + alpha d in the Lorentz cone (x interior)."""
    a = _jdot(d, d)
    b = _jdot(x, d)
    c = _jdot(x, x)
    alpha = np.full(len(x), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = b * b - a * c
        sq = np.sqrt(np.maximum(disc, 0.0))
        # roots of a t^2 + 2 b t + c = 0; c > 0 so a positive root exists iff
        # a < 0, or a > 0 with b < 0 and real roots, or a == 0 with b < 0
        r_neg_a = (-b - sq) / a
        r_pos_a = c / (-b + sq)
        lin = -c / (2 * b)
    pos = a > 0
    alpha = np.where(a < 0, r_neg_a, alpha)
    alpha = np.where(pos & (b < 0) & (disc >= 0), r_pos_a, alpha)
    alpha = np.where((a == 0) & (b < 0), lin, alpha)
    alpha = np.where(d[:, 0] < 0, np.minimum(alpha, -x[:, 0] / np.where(d[:, 0] < 0, d[:, 0], -1.0)), alpha)
    return float(np.min(alpha)) if len(alpha) else np.inf


# --------------------------------------------------------------------------
# normal-equation factorisation
# --------------------------------------------------------------------------

class NormalMatrix:
    """M = A diag(H_k) A^T with pattern analysis done once."""

    def __init__(self, A: sp.csc_matrix, m: int, reg: float = 1e-10):
        import cvxopt
        from cvxopt import cholmod
        self._cvx = cvxopt
        self._chol = cholmod
        cholmod.options["supernodal"] = 2
        self.A = A
        self.At = A.T.tocsr()
        self.N = A.shape[0]
        self.m = m
        self.reg = reg
        C = A.tocoo()
        mem = C.col // 3
        lc = C.col % 3
        order = np.lexsort((C.row, mem))
        mem, row, lc, val = mem[order], C.row[order], lc[order], C.data[order]
        key = mem * self.N + row
        first = np.r_[True, key[1:] != key[:-1]]
        slot_id = np.cumsum(first) - 1                 # unique (member,row) id
        mstart = np.searchsorted(mem[first], np.arange(m))
        slot = slot_id - mstart[mem]
        S = int(slot.max()) + 1 if len(slot) else 1
        self.S = S
        Ak = np.zeros((m, S, 3))
        np.add.at(Ak, (mem, slot, lc), val)
        rows = np.full((m, S), -1, dtype=np.int64)
        rows[mem, slot] = row
        self.Ak = Ak
        ra = np.repeat(rows[:, :, None], S, axis=2)
        rb = np.repeat(rows[:, None, :], S, axis=1)
        sel = (ra >= 0) & (rb >= 0) & (ra >= rb)
        self.sel = sel
        keys = rb[sel] * self.N + ra[sel]              # column-major, lower part
        ukeys, inv = np.unique(keys, return_inverse=True)
        self.pos = inv
        self.cols = ukeys // self.N
        self.rows = ukeys % self.N
        self.nnz = len(ukeys)
        self.diag = np.flatnonzero(self.rows == self.cols)
        missing = np.setdiff1d(np.arange(self.N), self.rows[self.diag])
        if len(missing):
            # structurally empty rows: give them an explicit diagonal slot
            self.rows = np.r_[self.rows, missing]
            self.cols = np.r_[self.cols, missing]
            order = np.lexsort((self.rows, self.cols))
            rank = np.empty_like(order)
            rank[order] = np.arange(len(order))
            self.pos = rank[self.pos]
            self.rows, self.cols = self.rows[order], self.cols[order]
            self.nnz = len(self.rows)
            self.diag = np.flatnonzero(self.rows == self.cols)
        self._I = cvxopt.matrix(self.rows.astype(int), tc="i")
        self._J = cvxopt.matrix(self.cols.astype(int), tc="i")
        self._sym = None
        self.H = None
        self.F = None

    def _values(self, H):
        loc = (self.Ak @ H) @ self.Ak.transpose(0, 2, 1)
        return np.bincount(self.pos, weights=loc[self.sel], minlength=self.nnz)

    def factor(self, H):
        self.H = H
        # the six distinct entries of each symmetric block, for fast products
        self._h = [np.ascontiguousarray(H[:, i, j]) for i, j in ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))]
        vals = self._values(H)
        d = vals[self.diag]
        dmax = float(np.max(d)) if len(d) else 1.0
        rel = self.reg
        cvx, chol = self._cvx, self._chol
        for attempt in range(4):
            v = vals.copy()
            # relative regularisation keeps small pivots accurate
            v[self.diag] += rel * d + 1e-14 * rel * dmax
            Ms = cvx.spmatrix(cvx.matrix(v), self._I, self._J, (self.N, self.N))
            try:
                if self._sym is None:
                    self._sym = chol.symbolic(Ms, uplo="L")
                F = self._sym
                chol.numeric(Ms, F)
                self.F = F
                self.delta = rel
                return
            except ArithmeticError:
                rel *= 1e3
        raise NumericalFailure("Cholesky factorisation failed", {"reg": rel})

    def matvec(self, y):
        u = (self.At @ y).reshape(-1, 3)
        u0, u1, u2 = u[:, 0], u[:, 1], u[:, 2]
        h00, h01, h02, h11, h12, h22 = self._h
        v = np.empty_like(u)
        v[:, 0] = h00 * u0 + h01 * u1 + h02 * u2
        v[:, 1] = h01 * u0 + h11 * u1 + h12 * u2
        v[:, 2] = h02 * u0 + h12 * u1 + h22 * u2
        return self.A @ v.ravel()

    def _raw_solve(self, r):
        B = self._cvx.matrix(np.ascontiguousarray(r, dtype=float).reshape(self.N, -1))
        self._chol.solve(self.F, B)
        return np.array(B).reshape(r.shape)

    def solve(self, r, refine: int = 3, rtol: float = 1e-13):
        """Solve M x = r: Cholesky solve followed by preconditioned CG
        steps, which remove the bias of the regularised factor."""
        x = self._raw_solve(r)
        if refine <= 0:
            return x
        res = r - self.matvec(x)
        nr = np.linalg.norm(r) + 1e-300
        zz = self._raw_solve(res)
        p = zz.copy()
        rz = res @ zz
        for _ in range(refine):
            if np.linalg.norm(res) <= rtol * nr or rz <= 0:
                break
            Mp = self.matvec(p)
            pMp = p @ Mp
            if pMp <= 0:
                break
            alpha = rz / pMp
            x = x + alpha * p
            res = res - alpha * Mp
            zz = self._raw_solve(res)
            rz_new = res @ zz
            p = zz + (rz_new / rz) * p
            rz = rz_new
        return x


# --------------------------------------------------------------------------
# solution
# --------------------------------------------------------------------------

@dataclass
class SocpSolution:
    s: np.ndarray
    q: np.ndarray
    r: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    w: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    t3: np.ndarray
    objective: float
    dual_objective: float
    status: str
    gap: float
    primal_residual: float
    dual_residual: float
    iterations: int
    solve_time: float = 0.0
    info: dict = field(default_factory=dict)

    @property
    def Z(self) -> float:
        return self.objective


def _rot_blocks(v):
    """Map stacked triples between rotated and Lorentz coordinates."""
    return (v.reshape(-1, 3) @ T).reshape(v.shape)


def _trivial_solution(prog: ConicProgram) -> SocpSolution:
    m, n = prog.m, prog.n
    z = np.zeros(m)
    c = prog.c.reshape(-1, 3)
    return SocpSolution(z, z.copy(), z.copy(), np.zeros(n), np.zeros(n), np.zeros(n),
                        c[:, 0].copy(), c[:, 1].copy(), c[:, 2].copy(),
                        0.0, 0.0, "Optimal", 0.0, 0.0, 0.0, 0)


def solve(prog: ConicProgram, tol: float = 1e-8, max_iter: int = 200,
          step: float = 0.99, reg: float = 1e-10, refine: int = 3) -> SocpSolution:
    """Solve the program; on success the relative primal and dual residuals
    and the relative duality gap are all at most ``tol``."""
    if not (0 < tol <= 1e-2):
        raise ValueError("tol must lie in (0, 1e-2]")
    t0 = time.perf_counter()
    b_raw = prog.rhs
    if not np.any(b_raw):
        return _trivial_solution(prog)
    c_raw = prog.c
    m = prog.m
    A = (prog.A @ sp.kron(sp.eye(m, format="csc"), sp.csc_matrix(T), format="csc")).tocsc()
    A.eliminate_zeros()
    At = A.T.tocsr()
    sb = float(np.max(np.abs(b_raw)))
    sc = float(np.max(np.abs(c_raw)))
    b = b_raw / sb
    c = _rot_blocks(c_raw) / sc
    nb = 1.0 + float(np.max(np.abs(b_raw)))
    nc = 1.0 + float(np.max(np.abs(c_raw)))

    M = NormalMatrix(A, m, reg)
    N = A.shape[0]
    x = np.zeros((m, 3)); x[:, 0] = 1.0
    z = x.copy()
    y = np.zeros(N)
    tau = kappa = 1.0
    status = "MaxIter"
    failure = None
    best = None
    stalls = 0
    it = 0
    for it in range(max_iter + 1):
        xf, zf = x.ravel(), z.ravel()
        rp = A @ xf - b * tau
        rd = -(At @ y) + c * tau - zf
        cx, by = c @ xf, b @ y
        rg = by - cx - kappa
        mu = (xf @ zf + tau * kappa) / (m + 1)
        # unscaled diagnostics
        pres = sb * np.max(np.abs(rp)) / tau / nb
        dres = sc * np.max(np.abs(rd)) / tau / nc
        pobj = sb * sc * cx / tau
        dobj = sb * sc * by / tau
        gap = abs(pobj - dobj) / (1.0 + abs(pobj))
        if not np.isfinite(pres + dres + gap + mu):
            failure = "non-finite iterate"
            break
        score = max(pres, dres, gap)
        if best is None or score < best[0]:
            best = (score, x.copy(), y.copy(), z.copy(), tau, it)
        log.debug("ipm %3d pobj %.9e dobj %.9e pres %.1e dres %.1e gap %.1e tau %.1e kap %.1e",
                  it, pobj, dobj, pres, dres, gap, tau, kappa)
        if pres <= tol and dres <= tol and gap <= tol:
            status = "Optimal"
            break
        if tau < 1e-6 * max(1.0, kappa):
            if by > 0 and np.max(np.abs(At @ y + zf)) <= tol * by:
                status = "Infeasible"
                break
            if cx < 0 and np.max(np.abs(A @ xf)) <= tol * -cx:
                status = "Unbounded"
                break
        if it == max_iter:
            break
        if it - best[5] >= 5:
            failure = "no progress"
            break

        try:
            with np.errstate(all="raise"):
                x, y, z, tau, kappa, stalls = _step(
                    A, At, M, b, c, x, y, z, tau, kappa, rp, rd, rg, mu, step, refine, stalls, it)
        except (FloatingPointError, NumericalFailure) as exc:
            failure = str(exc)
            break
    if status == "MaxIter" and best is not None:
        _, x, y, z, tau, _ = best
        if failure is not None:
            if best[0] <= tol:
                status = "Optimal"
            elif best[0] <= 100 * tol:
                # stalled just short of tol; polish may still certify it
                status = "NearOptimal"
            else:
                raise NumericalFailure(f"interior-point breakdown: {failure}",
                                       {"iter": it, "best_iter": best[5], "best_residual": best[0]})
    if status in ("Infeasible", "Unbounded"):
        tau_u = 1.0
    else:
        tau_u = tau
    xr = _rot_blocks((x / tau_u).ravel()).reshape(-1, 3) * sb
    yv = y / tau_u * sc
    tr = (c_raw - prog.A.T @ yv).reshape(-1, 3)
    n = prog.n
    xfin = xr.ravel()
    pobj = float(c_raw @ xfin)
    dobj = float(b_raw @ yv)
    pres = float(np.max(np.abs(prog.A @ xfin - b_raw))) / nb
    dres = float(np.max(rotated_cone_violation(tr))) / nc
    sol = SocpSolution(
        s=xr[:, 1].copy(), q=xr[:, 2].copy(), r=xr[:, 0].copy(),
        u1=yv[:n].copy(), u2=yv[n:2 * n].copy(), w=yv[2 * n:].copy(),
        t1=tr[:, 0].copy(), t2=tr[:, 1].copy(), t3=tr[:, 2].copy(),
        objective=pobj, dual_objective=dobj, status=status,
        gap=abs(pobj - dobj), primal_residual=pres, dual_residual=dres,
        iterations=it, solve_time=time.perf_counter() - t0,
    )
    return sol


def _step(A, At, M, b, c, x, y, z, tau, kappa, rp, rd, rg, mu, step, refine, stalls, it):
    """One predictor-corrector step of the embedded system."""
    m = len(x)
    cg_steps = 10
    nt = NTScaling.compute(x, z)
    lam = nt.W(z)
    H = nt.H()
    M.factor(H)
    Hf = lambda u: (H @ u.reshape(-1, 3, 1)).ravel()
    Hc = Hf(c)
    g = A @ Hc
    cHc = c @ Hc
    p = M.solve(g + b, refine=cg_steps)
    den0 = b @ p - g @ p + cHc

    def reduced(r1, r2, r3, r4, r5):
        xi = _jsolve(lam, r4)
        Wxi = nt.W(xi).ravel()
        tmp = Wxi + Hf(r2)
        v = M.solve(r1 - A @ tmp, refine=cg_steps)
        dtau = (r3 - b @ v + g @ v + c @ tmp + r5 / tau) / (den0 + kappa / tau)
        dy = v + p * dtau
        dz = -(At @ dy) + c * dtau - r2
        dx = Wxi - Hf(dz)
        dkap = (r5 - kappa * dtau) / tau
        return dx, dy, dz, dtau, dkap

    def direction(r1, r2, r3, r4, r5):
        # refinement on the full Newton system: only the first and third
        # block equations carry the error of the normal-equation solves
        dx, dy, dz, dtau, dkap = reduced(r1, r2, r3, r4, r5)
        n1 = np.max(np.abs(r1)) + 1e-300
        for _ in range(refine):
            e1 = r1 - (A @ dx - b * dtau)
            e3 = r3 - (b @ dy - c @ dx - dkap)
            if np.max(np.abs(e1)) <= 1e-12 * n1 and abs(e3) <= 1e-12 * (abs(r3) + 1e-300):
                break
            cx_, cy_, cz_, ct_, ck_ = reduced(e1, np.zeros_like(r2), e3, np.zeros_like(r4), 0.0)
            dx, dy, dz, dtau, dkap = dx + cx_, dy + cy_, dz + cz_, dtau + ct_, dkap + ck_
        return dx.reshape(-1, 3), dy, dz.reshape(-1, 3), dtau, dkap

    def max_alpha(dx, dz, dtau, dkap):
        a = min(_max_step(x, dx), _max_step(z, dz))
        if dtau < 0:
            a = min(a, -tau / dtau)
        if dkap < 0:
            a = min(a, -kappa / dkap)
        return a

    lamsq = _jprod(lam, lam)
    dxa, dya, dza, dta, dka = direction(-rp, -rd, -rg, -lamsq, -tau * kappa)
    aa = min(1.0, max_alpha(dxa, dza, dta, dka))
    sigma = (1.0 - aa) ** 3
    eta = 1.0 - sigma
    e = np.zeros((m, 3)); e[:, 0] = 1.0
    r4 = -lamsq - _jprod(nt.Winv(dxa), nt.W(dza)) + sigma * mu * e
    r5 = -tau * kappa - dta * dka + sigma * mu
    dx, dy, dz, dt, dk = direction(-eta * rp, -eta * rd, -eta * rg, r4, r5)
    alpha = min(1.0, step * max_alpha(dx, dz, dt, dk))
    if alpha < 1e-8:
        stalls += 1
        if stalls >= 3:
            raise NumericalFailure("step length collapsed", {"iter": it})
    else:
        stalls = 0
    x = x + alpha * dx
    z = z + alpha * dz
    y = y + alpha * dy
    tau += alpha * dt
    kappa += alpha * dk
    return x, y, z, tau, kappa, stalls


def _polish_residual(prog, idx, tight, y, s):
    n = prog.n
    B1, B2, D = prog.B1[idx], prog.B2[idx], prog.D[idx]
    a = prog.a[idx]
    dw = D @ y[2 * n:]
    sl = dw / (2 * a)
    F2 = np.r_[B1.T @ s, B2.T @ s, D.T @ (s * sl) - prog.f]
    Dw = prog.D @ y[2 * n:]
    Bu = prog.B1 @ y[:n] + prog.B2 @ y[n:2 * n]
    rows = np.r_[idx, tight]
    F1 = (0.25 * Dw[rows] ** 2 / prog.a[rows] + Bu[rows]) / prog.b_len[rows] - 1.0
    return np.r_[F2, F1], sl


def polish(sol: SocpSolution, prog: ConicProgram, slack_tol: float = 1e-4,
           s_floor: float = 1e-6, newton_steps: int = 60, rounds: int = 8,
           deltas=(1e-10, 1e-7, 1e-4), drop_factor: float = 2.0) -> SocpSolution:
    """Active-set Newton refinement of an interior-point solution.

    Interior-point iterates match primal and dual directions only to
    O(sqrt(mu)).  On the active set A (dual constraint tight within
    ``slack_tol`` and s above ``s_floor`` max s, retried with a floor 100
    times lower when some pass ended with too few members) the system

        (Dw)_k^2 / (4 a_k) + (Bu)_k = b_k              k in A + T
        B1_A^T s = 0,  B2_A^T s = 0,  D_A^T (s Dw / 2a) = f

    in (u1, u2, w, s_A) is solved by damped Newton.  T holds members that
    are tight at zero force; with T empty the system is square, otherwise
    steps are least squares.  Steps stop at s = 0; members reaching zero
    (and those that would within ``drop_factor`` times the same step)
    leave A.  Members whose dual constraint ends up violated join T, or A
    if the least-squares residual stalls.  q and r are rebuilt from
    q = s Dw / (2a), r = q^2 / (2 s).  The proximal shift is tried at each
    relative size in ``deltas`` until one run succeeds; larger shifts keep
    the non-unique part of the dual near the interior-point point.  On
    failure the input is returned with the reason in ``info``.
    """
    if sol.status not in ("Optimal", "NearOptimal") or prog.m == 0 or not np.any(sol.s > 0):
        return sol
    reason = "not run"
    for floor in (s_floor, 1e-2 * s_floor):
        reasons = []
        for delta in deltas:
            out, reason = _polish_once(sol, prog, slack_tol, floor, newton_steps, rounds,
                                       delta, drop_factor)
            if out is not None:
                out.info["polish_delta"] = delta
                out.info["polish_floor"] = floor
                return out
            reasons.append(reason)
        # a lower floor only adds members; useless when Newton stalled on too many
        if all(r.startswith("Newton residual") for r in reasons):
            break
    out = SocpSolution(**{**sol.__dict__})
    out.info = {**sol.info, "polished": False, "polish_reason": reason}
    return out


def _polish_once(sol, prog, slack_tol, s_floor, newton_steps, rounds, delta, drop_factor):
    from scipy.sparse.linalg import splu
    n = prog.n
    Dw = prog.D @ sol.w
    Bu = prog.B1 @ sol.u1 + prog.B2 @ sol.u2
    ratio = (0.25 * Dw ** 2 / prog.a + Bu) / prog.b_len
    smax = float(sol.s.max())
    act = (ratio >= 1.0 - slack_tol) & (sol.s >= s_floor * smax)
    tight = np.zeros(prog.m, dtype=bool)
    s_full = np.where(act, sol.s, 0.0)
    y = np.r_[sol.u1, sol.u2, sol.w]
    ftol = 1e-13 * (1.0 + float(np.max(np.abs(prog.f))))
    reason = "not run"
    ok = False
    err = np.inf
    for _ in range(rounds):
        ok = False
        hist = []
        for _ in range(newton_steps):
            idx = np.flatnonzero(act)
            tix = np.flatnonzero(tight)
            if len(idx) == 0:
                break
            s = s_full[idx]
            F, sl = _polish_residual(prog, idx, tix, y, s)
            err = float(np.max(np.abs(F)))
            hist.append(err)
            log.debug("polish |A|=%d |T|=%d err=%.3e", len(idx), len(tix), err)
            if err <= ftol:
                ok = True
                break
            if len(hist) > 6 and err > 0.5 * hist[-6]:
                break                   # stalled
            a = prog.a[idx]
            D = prog.D[idx]
            rows = np.r_[idx, tix]
            Ga = sp.vstack([prog.B1[idx].T, prog.B2[idx].T, D.T @ sp.diags(sl)]).tocsc()
            Dr = prog.D[rows]
            slr = (Dr @ y[2 * n:]) / (2 * prog.a[rows])
            Gr = sp.vstack([prog.B1[rows].T, prog.B2[rows].T, Dr.T @ sp.diags(slr)]).tocsc()
            E = sp.block_diag([sp.csc_matrix((2 * n, 2 * n)), D.T @ sp.diags(s / (2 * a)) @ D])
            J = sp.bmat([[E, Ga], [sp.diags(1.0 / prog.b_len[rows]) @ Gr.T, None]]).tocsc()
            nv = 3 * n + len(idx)
            dl = delta * abs(J).max()
            if len(tix) == 0:
                # proximal shift; refining against the shifted matrix keeps
                # force-free (null) directions damped
                K = J + sp.diags(np.r_[np.full(3 * n, dl), np.full(len(idx), -dl)])
                rhs = -F
            else:
                nr = J.shape[0]
                K = sp.bmat([[sp.identity(nr), J], [J.T, -dl * sp.identity(nv)]]).tocsc()
                rhs = np.r_[-F, np.zeros(nv)]
            try:
                lu = splu(K)
            except RuntimeError:
                reason = "singular active-set system"
                break
            d = lu.solve(rhs)
            for _ in range(2):
                d = d + lu.solve(rhs - K @ d)
            d = d[-nv:]
            dy, ds = d[:3 * n], d[3 * n:]
            neg = ds < 0
            tb = np.full(len(idx), np.inf)
            tb[neg] = -s[neg] / ds[neg]
            alpha = min(1.0, float(tb.min()))
            if alpha < 1.0:
                y = y + alpha * dy
                s_full[idx] = s + alpha * ds
                drop = idx[tb <= drop_factor * alpha]
                act[drop] = False
                s_full[drop] = 0.0
                hist.clear()
                continue
            step = 1.0
            while step > 1e-6:
                Ft, _ = _polish_residual(prog, idx, tix, y + step * dy, s + step * ds)
                if np.max(np.abs(Ft)) <= (1 - 1e-4 * step) * err:
                    break
                step *= 0.5
            y = y + step * dy
            s_full[idx] = s + step * ds
        u1, u2, w = y[:n], y[n:2 * n], y[2 * n:]
        full = (0.25 * (prog.D @ w) ** 2 / prog.a + prog.B1 @ u1 + prog.B2 @ u2) / prog.b_len
        if not ok:
            if reason != "not run" or len(idx) == 0 or not tight.any():
                reason = reason if reason != "not run" else (
                    f"Newton residual {err:.1e}" if len(idx) else "empty active set")
                break
            # zero-force rows cannot all be met: give them a force variable
            act |= tight
            s_full[tight] = s_floor * smax
            tight[:] = False
            reason = "active set kept growing"
            continue
        bad = (full > 1.0 + 1e-12) & ~act & ~tight
        log.debug("polish round: max violation %.3e on %d members", full.max() - 1.0, int(bad.sum()))
        if bad.any():
            tight |= bad
            ok = False
            reason = "active set kept growing"
            continue
        break
    if ok:
        u1, u2, w = y[:n], y[n:2 * n], y[2 * n:]
        s_new = s_full.copy()
        q = s_new * (prog.D @ w) / (2 * prog.a)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(s_new > 0, 0.5 * q * q / s_new, 0.0)
        x = np.column_stack([r, s_new, q]).ravel()
        Z = float(prog.c @ x)
        if abs(Z - sol.objective) > 1e-6 * (1.0 + abs(sol.objective)):
            ok, reason = False, f"objective moved by {abs(Z - sol.objective):.1e}"
    if not ok:
        return None, reason
    nb = 1.0 + float(np.max(np.abs(prog.rhs)))
    out = SocpSolution(**{**sol.__dict__})
    out.s, out.q, out.r = s_new, q, r
    out.u1, out.u2, out.w = u1.copy(), u2.copy(), w.copy()
    t = (prog.c - prog.A.T @ y).reshape(-1, 3)
    out.t1, out.t2, out.t3 = t[:, 0].copy(), t[:, 1].copy(), t[:, 2].copy()
    out.objective = Z
    out.status = "Optimal"
    out.dual_objective = float(prog.f @ w)
    out.gap = abs(out.objective - out.dual_objective)
    out.primal_residual = float(np.max(np.abs(prog.A @ x - prog.rhs))) / nb
    out.dual_residual = float(np.max(rotated_cone_violation(t))) / (1.0 + float(np.max(np.abs(prog.c))))
    info = {k: v for k, v in sol.info.items() if k != "polish_reason"}
    out.info = {**info, "polished": True, "raw_objective": sol.objective,
                "polish_members": int(act.sum())}
    return out, None


# --------------------------------------------------------------------------
# optimality conditions
# --------------------------------------------------------------------------

@dataclass
class KKTReport:
    cone_dual: float          # (i): max relative violation of the dual constraint
    equilibrium: float        # (ii): max equality residual / (1 + |f|)
    complementarity: float    # (iii): max |ratio - 1| where s is non-negligible
    transverse: float         # (iv): max |q - s Dw / (2 l)|
    r_elimination: float      # max |r - q^2 / (2 s)| where s is non-negligible
    gap: float                # |Z - f.w| / (1 + |Z|)

    def max(self) -> float:
        return max(self.cone_dual, self.equilibrium, self.complementarity,
                   self.transverse, self.r_elimination, self.gap)


def kkt_residuals(sol: SocpSolution, prog: ConicProgram, s_threshold: float = 1e-6) -> KKTReport:
    """Residuals of the discrete optimality conditions at a solution.

    ``s_threshold`` is relative to max s.  The lengths are those of the
    program, perturbation included.
    """
    a, bl = prog.a, prog.b_len
    Dw = prog.D @ sol.w
    Bu = prog.B1 @ sol.u1 + prog.B2 @ sol.u2
    ratio = (0.25 * Dw ** 2 / a + Bu) / bl
    nf = 1.0 + float(np.max(np.abs(prog.f))) if prog.n else 1.0
    eq = max(np.max(np.abs(prog.B1.T @ sol.s), initial=0.0),
             np.max(np.abs(prog.B2.T @ sol.s), initial=0.0),
             np.max(np.abs(prog.D.T @ sol.q - prog.f), initial=0.0)) / nf
    smax = float(np.max(sol.s, initial=0.0))
    act = sol.s > s_threshold * smax if smax > 0 else np.zeros(prog.m, bool)
    comp = float(np.max(np.abs(ratio[act] - 1.0), initial=0.0))
    trans = float(np.max(np.abs(sol.q - 0.5 * sol.s * Dw / a), initial=0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        relim = float(np.max(np.abs(sol.r[act] - 0.5 * sol.q[act] ** 2 / sol.s[act]), initial=0.0))
    return KKTReport(
        cone_dual=float(np.max(np.maximum(ratio - 1.0, 0.0), initial=0.0)),
        equilibrium=float(eq),
        complementarity=comp,
        transverse=trans,
        r_elimination=relim,
        gap=abs(sol.objective - float(prog.f @ sol.w)) / (1.0 + abs(sol.objective)),
    )


# --------------------------------------------------------------------------
# plain-text dump
# --------------------------------------------------------------------------

def dump_benchmark(prog: ConicProgram, path) -> None:
    """Write the standard-form program as plain text.

    Layout::

        VAULTOPT-CONIC 1
        VARS <3m> CONS <3n> NNZ <nnz>
        OBJ              then 3m lines: index value   (nonzeros only)
        RHS              then index value lines        (nonzeros only)
        A                then row col value lines, column-major
        CONES <m>        each triple (3k, 3k+1, 3k+2) is rotated: 2 x0 x1 >= x2^2
    """
    A = prog.A.tocsc()
    A.sort_indices()
    C = A.tocoo()
    c, b = prog.c, prog.rhs
    with open(path, "w") as fh:
        fh.write("VAULTOPT-CONIC 1\n")
        fh.write(f"VARS {A.shape[1]} CONS {A.shape[0]} NNZ {A.nnz}\n")
        nzc = np.flatnonzero(c)
        fh.write(f"OBJ {len(nzc)}\n")
        fh.writelines(f"{i} {c[i]:.17g}\n" for i in nzc)
        nzb = np.flatnonzero(b)
        fh.write(f"RHS {len(nzb)}\n")
        fh.writelines(f"{i} {b[i]:.17g}\n" for i in nzb)
        fh.write(f"A {A.nnz}\n")
        fh.writelines(f"{r} {cc} {v:.17g}\n" for r, cc, v in zip(C.row, C.col, C.data))
        fh.write(f"CONES {prog.m} RQUAD 3\n")


def load_benchmark(path):
    """Read a dump back as (c, A, b, m)."""
    with open(path) as fh:
        lines = fh.read().split("\n")
    assert lines[0] == "VAULTOPT-CONIC 1"
    _, nv, _, nc, _, _ = lines[1].split()
    nv, nc = int(nv), int(nc)
    pos = 2
    c = np.zeros(nv)
    k = int(lines[pos].split()[1]); pos += 1
    for ln in lines[pos:pos + k]:
        i, v = ln.split(); c[int(i)] = float(v)
    pos += k
    b = np.zeros(nc)
    k = int(lines[pos].split()[1]); pos += 1
    for ln in lines[pos:pos + k]:
        i, v = ln.split(); b[int(i)] = float(v)
    pos += k
    k = int(lines[pos].split()[1]); pos += 1
    arr = np.array([ln.split() for ln in lines[pos:pos + k]], dtype=float).reshape(-1, 3)
    pos += k
    A = sp.csc_matrix((arr[:, 2], (arr[:, 0].astype(int), arr[:, 1].astype(int))), shape=(nc, nv))
    m = int(lines[pos].split()[1])
    return c, A, b, m
