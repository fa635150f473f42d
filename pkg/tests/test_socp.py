import numpy as np
import pytest

from vaultopt.assembly import LoadSpec, assemble_program, discretize_load
from vaultopt.geometry import NodeGrid, PolygonDomain, build_grid, make_members, neighbor_members
from vaultopt.oracles import full_gs_reference_solve
from vaultopt.socp import (in_rotated_cone, kkt_residuals, load_benchmark, dump_benchmark,
                           polish, rotated_cone_violation, solve)

TOL = 1e-8


def centre_program(N=3, P=-1.0):
    g = build_grid(PolygonDomain.rectangle(), 1 / (N - 1))
    f = discretize_load(LoadSpec(point_loads=[((0.5, 0.5), P)]), g)
    return g, assemble_program(g, neighbor_members(g), f)


def test_zero_load_is_trivial():
    g = build_grid(PolygonDomain.rectangle(), 0.25)
    sol = solve(assemble_program(g, neighbor_members(g), np.zeros(g.n)))
    assert sol.status == "Optimal" and sol.objective == 0
    assert not np.any(sol.s) and not np.any(sol.q) and not np.any(sol.w)


def test_bad_tol():
    _, p = centre_program()
    with pytest.raises(ValueError):
        solve(p, tol=0.0)


def test_three_by_three_matches_reference():
    g, p = centre_program()
    sol = solve(p, tol=TOL)
    assert sol.status == "Optimal"
    # 3x3 neighbour set is already the full ground structure
    Zref = full_gs_reference_solve(g, None, p.f)
    assert sol.objective == pytest.approx(Zref, rel=1e-7)


def test_optimality_certificate():
    _, p = centre_program(5)
    sol = solve(p, tol=TOL)
    assert abs(sol.objective - p.f @ sol.w) <= TOL * (1 + abs(sol.objective))
    x = np.column_stack([sol.r, sol.s, sol.q])
    assert in_rotated_cone(x, 10 * TOL).all()
    # the raw iterate meets (iv) only to about sqrt(mu); the polished one to round-off
    assert kkt_residuals(polish(sol, p), p).max() <= 100 * TOL


def test_load_scaling():
    _, p = centre_program(5)
    Z1 = solve(p, tol=TOL).objective
    p3 = assemble_program(p.grid, p.members, 3.7 * p.f)
    assert solve(p3, tol=TOL).objective == pytest.approx(3.7 * Z1, rel=10 * TOL)


def test_geometric_scaling():
    # point load on a disk: Z grows linearly with the radius
    out = []
    for R in (1.0, 2.5):
        dom = PolygonDomain.regular_polygon(R, 32)
        g = build_grid(dom, R / 4)
        f = discretize_load(LoadSpec(point_loads=[((0, 0), -1.0)]), g)
        out.append(solve(assemble_program(g, neighbor_members(g), f), tol=TOL).objective)
    assert out[1] == pytest.approx(2.5 * out[0], rel=1e-6)


def test_weak_duality():
    _, p = centre_program(7)
    sol = solve(p, tol=TOL)
    assert sol.objective >= sol.dual_objective - TOL * (1 + abs(sol.objective))


def test_cone_membership_is_self_dual(rng):
    x = rng.normal(size=(400, 3))
    y = rng.normal(size=(400, 3))
    inside = in_rotated_cone(x)
    both = inside & in_rotated_cone(y)
    assert np.all(np.einsum("ij,ij->i", x[both], y[both]) >= -1e-12)
    assert np.all((rotated_cone_violation(x) <= 0) == inside)


def test_kkt_toy_exact():
    # free node (1, 0) between supports at the origin and (2, 0), pushed down by 1
    g = NodeGrid(np.array([[1.0, 0.0], [0.0, 0.0], [2.0, 0.0]]), np.array([False, True, True]),
                 np.array([False, True, True]), 1.0)
    mem = make_members(g, [1, 0], [0, 2])
    p = assemble_program(g, mem, np.array([-1.0]))
    sol = solve(p, tol=1e-10)
    sol = polish(sol, p)
    # w = -2 by the cone's closed form; each bar carries s = 1/2
    np.testing.assert_allclose(sol.s, [0.5, 0.5], atol=1e-9)
    assert sol.objective == pytest.approx(2.0, rel=1e-9)
    rep = kkt_residuals(sol, p)
    assert rep.max() <= 1e-9


def test_kkt_detects_perturbed_w():
    _, p = centre_program(5)
    sol = polish(solve(p, tol=TOL), p)
    base = kkt_residuals(sol, p)
    sol.w = sol.w + 1e-3
    rep = kkt_residuals(sol, p)
    assert base.transverse < 1e-8
    assert rep.transverse >= 1e-4 or rep.complementarity >= 1e-4


def test_polish_certifies():
    _, p = centre_program(9)
    raw = solve(p, tol=TOL)
    pol = polish(raw, p)
    assert pol.info.get("polished") is True
    assert abs(pol.objective - raw.objective) <= 1e-6 * (1 + raw.objective)
    assert kkt_residuals(pol, p).max() <= 1e-10


def test_benchmark_roundtrip(tmp_path):
    _, p = centre_program(5)
    path = tmp_path / "prog.txt"
    dump_benchmark(p, path)
    c, A, b, m = load_benchmark(path)
    assert m == p.m
    np.testing.assert_array_equal(c, p.c)
    np.testing.assert_array_equal(b, p.rhs)
    assert abs(A - p.A).max() == 0
    dump_benchmark(p, tmp_path / "again.txt")
    assert path.read_bytes() == (tmp_path / "again.txt").read_bytes()
