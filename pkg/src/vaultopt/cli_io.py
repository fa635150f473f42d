"""Run configuration, the end-to-end pipeline, reports and mesh export.

A configuration is a JSON object::

    {
      "domain":  {"type": "rectangle", "a": 1.0, "b": 1.0}
               | {"type": "regular_polygon", "R": 1.0, "N": 256, "circumscribed": true}
               | {"type": "polygon", "outer": [[x, y], ...], "holes": [[[x, y], ...]]},
      "h": 0.02,                      # or "nodes_per_side": 51 for rectangles
      "loads": {"point": [[x, y, P]], "line": [[x1, y1, x2, y2, t]], "area": [p]},
      "mode": "compression",          # or "tension"
      "design": {"type": "plastic"} | {"type": "elastic", "V0": 1.0, "E0": 1.0},
      "variant": {"type": "vault"} | {"type": "archgrid"}
               | {"type": "slanted", "grad_z0": [gx, gy]}
               | {"type": "gamma_supports", "points": [[x, y], ...]},
      "tol": 1e-8, "tol_v": 1e-6, "eps_perturb": null, "max_iter": 200, "threads": 1,
      "outputs": {"mesh": "shell.obj", "report": "report.json"}
    }

Loads are positive upward.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .adaptive import AdaptiveOptions, member_adding_solve
from .assembly import LoadSpec, Metric, discretize_load
from .errors import VaultOptError
from .geometry import NodeGrid, PolygonDomain, build_grid, set_supports
from .recovery import (ElasticState, GridShell, colinearity_check, compliance,
                       grid_shell_equilibrium_residual, recover_elastic, recover_plastic)
from .socp import kkt_residuals

log = logging.getLogger(__name__)

VARIANTS = ("vault", "archgrid", "slanted", "gamma_supports")


class ConfigError(VaultOptError, ValueError):
    pass


@dataclass
class RunConfig:
    domain: dict
    h: float
    loads: dict = field(default_factory=dict)
    mode: str = "compression"
    design: dict = field(default_factory=lambda: {"type": "plastic"})
    variant: dict = field(default_factory=lambda: {"type": "vault"})
    tol: float = 1e-8
    tol_v: float = 1e-6
    eps_perturb: float | None = None
    max_iter: int = 200
    threads: int = 1
    outputs: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {f for f in cls.__dataclass_fields__} - {"nodes_per_side"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "domain" not in d:
            raise ConfigError("config needs a domain")
        nps = d.pop("nodes_per_side", None)
        if "h" not in d:
            if nps is None:
                raise ConfigError("config needs h or nodes_per_side")
            dom = d["domain"]
            if dom.get("type") != "rectangle":
                raise ConfigError("nodes_per_side applies to rectangles only")
            d["h"] = float(dom.get("a", 1.0)) / (int(nps) - 1)
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def validate(self) -> None:
        if not self.h > 0:
            raise ConfigError("h must be positive")
        if self.mode not in ("tension", "compression"):
            raise ConfigError(f"mode must be tension or compression, got {self.mode!r}")
        kind = self.design.get("type", "plastic")
        if kind == "elastic":
            if not (self.design.get("V0", 0) > 0 and self.design.get("E0", 0) > 0):
                raise ConfigError("elastic design needs V0 > 0 and E0 > 0")
        elif kind != "plastic":
            raise ConfigError(f"design type must be plastic or elastic, got {kind!r}")
        vt = self.variant.get("type", "vault")
        if vt not in VARIANTS:
            raise ConfigError(f"variant type must be one of {VARIANTS}")
        if vt == "slanted" and len(self.variant.get("grad_z0", ())) != 2:
            raise ConfigError("slanted variant needs grad_z0 = [gx, gy]")
        if vt == "gamma_supports" and not self.variant.get("points"):
            raise ConfigError("gamma_supports variant needs a list of support points")
        if not (0 < self.tol <= 1e-2):
            raise ConfigError("tol must lie in (0, 1e-2]")

    def build_domain(self) -> PolygonDomain:
        d = self.domain
        kind = d.get("type")
        if kind == "rectangle":
            return PolygonDomain.rectangle(float(d.get("a", 1.0)), d.get("b"))
        if kind == "regular_polygon":
            return PolygonDomain.regular_polygon(float(d["R"]), int(d["N"]),
                                                 tuple(d.get("center", (0.0, 0.0))),
                                                 bool(d.get("circumscribed", True)))
        if kind == "polygon":
            return PolygonDomain(d["outer"], d.get("holes", []))
        raise ConfigError(f"unknown domain type {kind!r}")

    def load_spec(self) -> LoadSpec:
        L = self.loads
        return LoadSpec(point_loads=[((x, y), P) for x, y, P in L.get("point", [])],
                        line_loads=[((x1, y1), (x2, y2), t) for x1, y1, x2, y2, t in L.get("line", [])],
                        area_loads=list(L.get("area", [])))

    def metric(self) -> Metric:
        if self.variant.get("type") == "slanted":
            return Metric.slanted(self.variant["grad_z0"])
        return Metric()


@dataclass
class RunReport:
    grid: str
    nodes: int
    free_nodes: int
    full_gs: int
    iterations: int
    active_gs: int
    cpu_time: float
    Z: float
    max_elevation: float
    kkt: dict
    equilibrium_residual: float
    colinearity_violations: int
    status: str                 # "Optimal" or "Failed"
    solver_status: str
    mode: str
    design: str
    variant: str
    elastic: dict = field(default_factory=dict)
    diagnostics: list = field(default_factory=list)
    history: list = field(default_factory=list)

    def table_row(self) -> str:
        return (f"{self.grid:>9s}  {self.full_gs:>12d}  {self.iterations:>3d}  {self.active_gs:>9d}  "
                f"{self.cpu_time:9.1f}s  Z={self.Z:.6g}  max|z|={self.max_elevation:.6g}  {self.status}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _grid_label(grid: NodeGrid, domain: PolygonDomain) -> str:
    lo, hi = domain.outer_ring.min(axis=0), domain.outer_ring.max(axis=0)
    k = np.rint((hi - lo) / grid.h).astype(int) + 1
    return f"{k[0]}x{k[1]}"


def _gamma_grid(grid: NodeGrid, points) -> NodeGrid:
    pts = np.asarray(points, float).reshape(-1, 2)
    d, idx = cKDTree(grid.nodes).query(pts)
    if np.any(d > 1e-9 * grid.h):
        raise ConfigError("support points must be grid nodes")
    return set_supports(grid, idx)


def run(config: RunConfig, export: bool = True):
    """Grid, loads, member adding, recovery, verification and export.

    Returns (report, grid_shell, elastic_state_or_None).
    """
    t0 = time.perf_counter()
    domain = config.build_domain()
    grid = build_grid(domain, config.h)
    vt = config.variant.get("type", "vault")
    if vt == "gamma_supports":
        grid = _gamma_grid(grid, config.variant["points"])
    metric = config.metric()
    f = discretize_load(config.load_spec(), grid)
    threads = int(os.environ.get("VAULTOPT_THREADS", config.threads))
    opts = AdaptiveOptions(tol=config.tol, tol_v=config.tol_v, max_iter=config.max_iter,
                           eps_perturb=config.eps_perturb, archgrid=(vt == "archgrid"),
                           threads=threads)
    sol, state = member_adding_solve(grid, domain, f, metric, opts)
    prog = state.program
    tol = config.tol
    diag = []
    kkt = kkt_residuals(sol, prog)
    if sol.status != "Optimal":
        diag.append(f"solver status {sol.status}")
    if kkt.max() > 100 * tol:
        diag.append(f"KKT residual {kkt.max():.2e} exceeds {100 * tol:.1e}")
    design = config.design.get("type", "plastic")
    elastic = {}
    el_state = None
    if design == "elastic":
        V0, E0 = float(config.design["V0"]), float(config.design["E0"])
        gs, el_state = recover_elastic(sol, prog, V0, E0, config.mode)
        C1, C2 = compliance(gs, el_state, f)
        Cref = sol.objective ** 2 / (2 * E0 * V0)
        e_ref = sol.objective / (E0 * V0) * (1 if config.mode == "tension" else -1)
        elastic = {"V0": V0, "E0": E0, "volume": gs.volume, "compliance": C1,
                   "compliance_stress": C2, "compliance_expected": Cref,
                   "max_strain_error": float(np.max(np.abs(el_state.strain - e_ref), initial=0.0)) / abs(e_ref)}
        if abs(gs.volume - V0) > 1e-9 * V0:
            diag.append("elastic volume differs from V0")
        if max(abs(C1 - Cref), abs(C2 - Cref)) > 1e-6 * Cref:
            diag.append("compliance differs from Z^2/(2 E0 V0)")
        if elastic["max_strain_error"] > 1e-6:
            diag.append("member strains are not uniform")
    else:
        gs = recover_plastic(sol, prog, config.mode)
    eq = grid_shell_equilibrium_residual(gs, f)
    if eq > 100 * tol:
        diag.append(f"grid-shell equilibrium residual {eq:.2e}")
    col = colinearity_check(sol, prog, 1e-5)
    if col:
        diag.append(f"{len(col)} colinearity violations")
    report = RunReport(
        grid=_grid_label(grid, domain), nodes=grid.nbar, free_nodes=grid.n, full_gs=grid.full_count,
        iterations=state.iter, active_gs=state.m_active, cpu_time=time.perf_counter() - t0,
        Z=sol.objective, max_elevation=gs.max_elevation, kkt=asdict(kkt), equilibrium_residual=eq,
        colinearity_violations=len(col), status="Failed" if diag else "Optimal",
        solver_status=sol.status, mode=config.mode, design=design, variant=vt,
        elastic=elastic, diagnostics=diag, history=state.history)
    if export:
        out = config.outputs
        if out.get("mesh"):
            export_mesh(gs, out["mesh"], f, el_state)
        if out.get("report"):
            Path(out["report"]).write_text(report.to_json() + "\n")
    return report, gs, el_state


def _fmt(x: float) -> str:
    return repr(float(x))


def export_mesh(gs: GridShell, path, f=None, state: ElasticState | None = None) -> None:
    """OBJ line mesh (every grid node, one ``l`` element per member) and a
    JSON sidecar ``<path>.json`` with member forces, areas, 3D lengths,
    support flags, nodal loads and displacements."""
    path = Path(path)
    X = gs.nodes3d
    m = gs.members
    lines = [f"# grid-shell {gs.mode} {gs.design} Z={_fmt(gs.Z)}",
             f"# {len(X)} vertices {len(m)} lines"]
    lines += [f"v {_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in X]
    lines += [f"l {i + 1} {j + 1}" for i, j in zip(m.i_minus, m.i_plus)]
    path.write_text("\n".join(lines) + "\n")
    F = np.zeros(gs.grid.nbar)
    if f is not None:
        F[gs.grid.chi] = f
    side = {
        "mode": gs.mode, "design": gs.design, "Z": float(gs.Z),
        "V0": gs.V0, "E0": gs.E0,
        "support": gs.grid.is_support.astype(int).tolist(),
        "load": F.tolist(),
        "members": {"k": m.k.tolist(), "i": m.i_minus.tolist(), "j": m.i_plus.tolist(),
                    "s_hat": gs.s_hat.tolist(), "area": gs.area.tolist(),
                    "length3d": gs.length3d.tolist()},
    }
    if state is not None:
        U = np.zeros((gs.grid.nbar, 3))
        U[gs.grid.chi] = np.column_stack([state.u1, state.u2, state.w])
        side["displacement"] = U.tolist()
        side["strain"] = state.strain.tolist()
    Path(str(path) + ".json").write_text(json.dumps(side, sort_keys=True, indent=1) + "\n")


def read_mesh(path):
    """Vertices, line elements (0-based) and the sidecar dict."""
    V, L = [], []
    for line in Path(path).read_text().splitlines():
        if line.startswith("v "):
            V.append([float(t) for t in line.split()[1:4]])
        elif line.startswith("l "):
            L.append([int(t) - 1 for t in line.split()[1:3]])
    side = json.loads(Path(str(path) + ".json").read_text())
    return np.array(V).reshape(-1, 3), np.array(L, dtype=int).reshape(-1, 2), side


def mesh_equilibrium_residual(path) -> float:
    """Equilibrium residual recomputed from an exported mesh alone."""
    V, L, side = read_mesh(path)
    s = np.asarray(side["members"]["s_hat"])
    load = np.asarray(side["load"])
    free = ~np.asarray(side["support"], bool)
    R = np.zeros_like(V)
    if len(L):
        d = V[L[:, 1]] - V[L[:, 0]]
        t = d / np.linalg.norm(d, axis=1)[:, None]
        np.add.at(R, L[:, 0], s[:, None] * t)
        np.add.at(R, L[:, 1], -s[:, None] * t)
    R[:, 2] += load
    if not free.any():
        return 0.0
    return float(np.max(np.linalg.norm(R[free], axis=1))) / (1.0 + float(np.max(np.abs(load))))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="vaultopt", description="Optimal vault and grid-shell form finding.")
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--tol", type=float)
    ap.add_argument("--tol-v", type=float)
    ap.add_argument("--max-iter", type=int)
    ap.add_argument("--threads", type=int)
    ap.add_argument("--export-mesh")
    ap.add_argument("--export-report")
    ap.add_argument("--log-level", default="WARNING")
    args = ap.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING),
                        format="%(message)s")
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
        for key, val in (("tol", args.tol), ("tol_v", args.tol_v),
                         ("max_iter", args.max_iter), ("threads", args.threads)):
            if val is not None:
                raw[key] = val
        outs = dict(raw.get("outputs", {}))
        if args.export_mesh:
            outs["mesh"] = args.export_mesh
        if args.export_report:
            outs["report"] = args.export_report
        raw["outputs"] = outs
        cfg = RunConfig.from_dict(raw)
        report, _, _ = run(cfg)
    except (VaultOptError, OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(report.table_row())
    for d in report.diagnostics:
        print(f"verification: {d}", file=sys.stderr)
    return 0 if report.status == "Optimal" else 2


if __name__ == "__main__":
    sys.exit(main())
