"""Member adding: grow the active ground structure until no member of the
full ground structure violates its dual constraint.

Each iteration logs one line on the ``vaultopt.adaptive`` logger::

    iter=<k> phase=<perturbed|exact> m_iter=<active members> Z=<objective> violations=<added> wall=<seconds>s
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .assembly import Metric, archgrid_filter, assemble_program, cost_lengths
from .errors import MaxIter, NonTermination, NumericalFailure
from .geometry import (CHUNK, MemberArray, NodeGrid, PolygonDomain, make_members,
                       members_from_ids, neighbor_members, pair_unrank, segments_in_closure)
from .socp import SocpSolution, polish, solve

log = logging.getLogger(__name__)

LOG_FORMAT = "iter=%d phase=%s m_iter=%d Z=%.10g violations=%d wall=%.2fs"


def _extend(grid: NodeGrid, v) -> np.ndarray:
    out = np.zeros(grid.nbar)
    out[grid.chi] = v
    return out


def _scan_range(grid, U1, U2, W, metric, eps, tol_v, archgrid, k0, k1):
    k = np.arange(k0, k1, dtype=np.int64)
    i, j = pair_unrank(k, grid.nbar)
    block = make_members(grid, i, j, k)
    if archgrid:
        block = archgrid_filter(block)
    dw = W[block.i_plus] - W[block.i_minus]
    bu = ((U1[block.i_plus] - U1[block.i_minus]) * block.cos1
          + (U2[block.i_plus] - U2[block.i_minus]) * block.cos2)
    a, b = cost_lengths(block, metric, eps)
    ratio = (0.25 * dw * dw / a + bu) / b
    hit = ratio > 1.0 + tol_v
    return block.take(hit), ratio[hit]


def violation_scan(grid: NodeGrid, domain: PolygonDomain | None, u1, u2, w,
                   metric: Metric = Metric(), tol_v: float = 1e-6, eps: float = 0.0,
                   archgrid: bool = False, threads: int = 1, chunk: int = CHUNK,
                   return_ratio: bool = False):
    """Ids of members of the full ground structure with
    ((Dw)^2 / (4a) + Bu) / b > 1 + tol_v, in increasing order.

    Pairs are generated chunk by chunk and never stored in full.  For
    nonconvex domains the containment test runs only on violating pairs.
    """
    U1, U2, W = _extend(grid, u1), _extend(grid, u2), _extend(grid, w)
    m = grid.full_count
    ranges = [(k0, min(k0 + chunk, m)) for k0 in range(0, m, chunk)]
    job = lambda r: _scan_range(grid, U1, U2, W, metric, eps, tol_v, archgrid, *r)
    if threads > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(job, ranges))
    else:
        parts = [job(r) for r in ranges]
    hits = MemberArray.concat([p[0] for p in parts])
    ratio = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0)
    if domain is not None and not domain.is_convex and len(hits):
        keep = segments_in_closure(domain, grid.nodes[hits.i_minus], grid.nodes[hits.i_plus])
        hits, ratio = hits.take(keep), ratio[keep]
    return (hits.k, ratio) if return_ratio else hits.k


@dataclass
class AdaptiveOptions:
    tol: float = 1e-8
    tol_v: float = 1e-6
    max_iter: int = 200             # interior-point iterations per solve
    iter_cap: int = 100             # member-adding iterations
    eps_perturb: float | None = None  # default 1e-7 * domain diameter
    exact_final: bool = True        # re-solve with unperturbed lengths
    polish: bool = True
    archgrid: bool = False
    threads: int = 1
    chunk: int = CHUNK
    max_add: int | None = None      # cap additions per iteration (largest violations first)
    max_add_ratio: float | None = 1.0  # ... and at this multiple of the active count


@dataclass
class AdaptiveState:
    iter: int = 0
    active: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    history: list = field(default_factory=list)
    solution: SocpSolution | None = None
    program: object = None
    full_count: int = 0
    wall_time: float = 0.0

    @property
    def m_active(self) -> int:
        return len(self.active)


def initial_members(grid: NodeGrid, domain: PolygonDomain | None, archgrid: bool) -> MemberArray:
    mem = neighbor_members(grid, domain)
    return archgrid_filter(mem) if archgrid else mem


def member_adding_solve(grid: NodeGrid, domain: PolygonDomain | None, f,
                        metric: Metric = Metric(), options: AdaptiveOptions | None = None,
                        initial: MemberArray | None = None):
    """Solve the full-ground-structure program by member adding.

    With a positive length perturbation the loop first runs on perturbed
    lengths, which keeps the active set small where the dual constraint is
    tight in every direction.  The final active set is then re-solved with
    the true lengths and re-scanned, so the returned solution is optimal
    for the unperturbed problem over the full ground structure.
    """
    opt = options or AdaptiveOptions()
    t_start = time.perf_counter()
    eps = opt.eps_perturb
    if eps is None:
        eps = 0.0 if opt.archgrid else 1e-7 * (domain.diameter if domain is not None
                                              else float(np.ptp(grid.nodes, axis=0).max()))
    mem = initial if initial is not None else initial_members(grid, domain, opt.archgrid)
    active = np.sort(mem.k)
    state = AdaptiveState(active=active, full_count=grid.full_count)
    phases = ["perturbed", "exact"] if (eps > 0 and opt.exact_final) else ["perturbed" if eps > 0 else "exact"]
    it = 0
    for phase in phases:
        e = eps if phase == "perturbed" else 0.0
        prev_Z = np.inf
        while True:
            it += 1
            if it > opt.iter_cap:
                raise NonTermination(f"member adding exceeded {opt.iter_cap} iterations")
            t0 = time.perf_counter()
            members = members_from_ids(grid, active)
            prog = assemble_program(grid, members, f, metric, e)
            sol = solve(prog, tol=opt.tol, max_iter=opt.max_iter)
            if sol.status in ("Infeasible", "Unbounded"):
                raise NumericalFailure(f"solver reported {sol.status} on {len(active)} members",
                                       {"iter": it, "status": sol.status})
            if sol.status == "MaxIter":
                raise MaxIter(f"interior point hit {opt.max_iter} iterations on {len(active)} members")
            if opt.polish and phase == phases[-1]:
                sol = polish(sol, prog)
            ids, ratio = violation_scan(grid, domain, sol.u1, sol.u2, sol.w, metric, opt.tol_v, e,
                                        opt.archgrid, opt.threads, opt.chunk, return_ratio=True)
            new = ~np.isin(ids, active, assume_unique=True)
            ids, ratio = ids[new], ratio[new]
            cap = opt.max_add
            if opt.max_add_ratio is not None:
                rc = max(1, int(np.ceil(opt.max_add_ratio * len(active))))
                cap = rc if cap is None else min(cap, rc)
            if cap is not None and len(ids) > cap:
                ids = np.sort(ids[np.argsort(-ratio, kind="stable")[:cap]])
            wall = time.perf_counter() - t0
            log.info(LOG_FORMAT, it, phase, len(active), sol.objective, len(ids), wall)
            if sol.objective > prev_Z * (1 + 10 * opt.tol) + opt.tol:
                log.warning("objective increased from %.10g to %.10g", prev_Z, sol.objective)
            prev_Z = sol.objective
            state.history.append({"iter": it, "phase": phase, "m_iter": len(active),
                                  "Z": sol.objective, "violations": len(ids), "wall": wall,
                                  "status": sol.status, "ipm_iter": sol.iterations})
            state.solution, state.program = sol, prog
            if len(ids) == 0:
                break
            active = np.union1d(active, ids)
    state.iter = it
    state.active = active
    state.wall_time = time.perf_counter() - t_start
    return state.solution, state
