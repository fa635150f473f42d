import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vaultopt.assembly import (LoadSpec, Metric, archgrid_filter, assemble_program,
                               discretize_load, dual_ratio, member_length)
from vaultopt.errors import EmptyActiveSet, LoadOffNode, LoadOnSupport
from vaultopt.geometry import (MemberArray, NodeGrid, PolygonDomain, build_grid, make_members,
                               neighbor_members)

SQ = PolygonDomain.rectangle()
G = (-0.2, 0.5)


@pytest.fixture(scope="module")
def fine():
    return build_grid(SQ, 1 / 200)


def test_uniform_area_load(fine):
    f = discretize_load(LoadSpec(area_loads=[-1.0]), fine)
    np.testing.assert_allclose(f, -1 / 200 ** 2, rtol=1e-14)


def test_knife_loads(fine):
    spec = LoadSpec(line_loads=[((0, 0), (1, 1), -1.0), ((1, 0), (0, 1), -1.0)])
    f = discretize_load(spec, fine)
    X = fine.nodes[fine.chi]
    on = np.isclose(X[:, 0], X[:, 1]) | np.isclose(X[:, 0] + X[:, 1], 1)
    centre = np.all(np.isclose(X, 0.5), axis=1)
    np.testing.assert_allclose(f[centre], -2 * np.sqrt(2) / 200)
    np.testing.assert_allclose(f[on & ~centre], -np.sqrt(2) / 200)
    assert np.all(f[~on] == 0)


def test_point_load_single_entry():
    g = build_grid(SQ, 0.25)
    f = discretize_load(LoadSpec(point_loads=[((0.25, 0.5), -3.0)]), g)
    assert np.count_nonzero(f) == 1 and f.min() == -3.0


def test_off_node_load_rejected():
    g = build_grid(SQ, 0.25)
    with pytest.raises(LoadOffNode):
        discretize_load(LoadSpec(point_loads=[((0.3, 0.5), -1.0)]), g)
    with pytest.raises(LoadOffNode):
        discretize_load(LoadSpec(line_loads=[((0, 0), (1, 0.5), -1.0)]), g)


def test_load_on_support_warns_and_drops():
    g = build_grid(SQ, 0.25)
    with pytest.warns(LoadOnSupport):
        f = discretize_load(LoadSpec(point_loads=[((0, 0.5), -1.0)]), g)
    assert not np.any(f)


def test_total_load_conserved():
    g = build_grid(SQ, 0.125)
    spec = LoadSpec(point_loads=[((0.5, 0.5), -1.0), ((0.25, 0.75), 2.0)],
                    line_loads=[((0.125, 0.5), (0.875, 0.5), -1.5)], area_loads=[-0.7])
    f = discretize_load(spec, g)
    expect = 1.0 - 1.5 * 0.75 - 0.7 * g.n * 0.125 ** 2
    assert f.sum() == pytest.approx(expect, rel=1e-12)


def test_member_lengths():
    g = NodeGrid(np.array([[0.0, 0], [1, 0], [1, 1]]), np.ones(3, bool), np.ones(3, bool), 1.0)
    m = make_members(g, [0, 0], [1, 2])
    np.testing.assert_allclose(member_length(m, g), [1, np.sqrt(2)])
    np.testing.assert_allclose(member_length(m, g, Metric.slanted(G)), [np.sqrt(1.04), np.sqrt(2.09)])
    np.testing.assert_array_equal(member_length(m, g, Metric.slanted((0, 0))), member_length(m, g))
    assert member_length(m, g, Metric.slanted(G))[1] == pytest.approx(1.4457, abs=1e-4)


def test_single_horizontal_member():
    g = NodeGrid(np.array([[0.0, 0], [1, 0]]), np.zeros(2, bool), np.zeros(2, bool), 1.0)
    p = assemble_program(g, make_members(g, [0], [1]), np.zeros(2))
    np.testing.assert_array_equal(p.B1.toarray(), [[-1, 1]])
    np.testing.assert_array_equal(p.B2.toarray(), [[0, 0]])
    np.testing.assert_array_equal(p.D.toarray(), [[-1, 1]])


def test_support_end_contributes_nothing():
    g = NodeGrid(np.array([[0.0, 0], [1, 0]]), np.zeros(2, bool), np.array([True, False]), 1.0)
    p = assemble_program(g, make_members(g, [0], [1]), np.zeros(1))
    assert p.B1.shape == (1, 1) and p.B1.nnz == 1 and p.D.toarray()[0, 0] == 1


def test_three_by_three_program():
    g = build_grid(SQ, 0.5)
    p = assemble_program(g, neighbor_members(g), np.array([-1.0]))
    assert p.m == 20 and p.n == 1 and p.A.shape == (3, 60)


def test_matrix_structure():
    g = build_grid(PolygonDomain.regular_polygon(1.0, 9), 0.2)
    p = assemble_program(g, neighbor_members(g), np.zeros(g.n))
    for B in (p.B1, p.B2):
        assert np.diff(B.indptr).max() <= 2 and np.abs(B.data).max() <= 1 + 1e-15
    assert set(np.unique(p.D.data)) <= {-1.0, 1.0}
    both = g.is_support[p.members.i_minus] & g.is_support[p.members.i_plus]
    assert np.all(np.diff(p.D.indptr)[both] == 0)


def test_empty_active_set():
    g = build_grid(SQ, 0.5)
    with pytest.raises(EmptyActiveSet):
        assemble_program(g, MemberArray.empty(), np.zeros(1))


def test_archgrid_counts():
    g = build_grid(SQ, 1 / 100)
    assert len(archgrid_filter(neighbor_members(g))) == 20_200
    g = build_grid(SQ, 1 / 200)
    assert len(archgrid_filter(neighbor_members(g))) == 80_400


def test_archgrid_idempotent_and_drops_diagonal():
    g = build_grid(SQ, 0.25)
    m = neighbor_members(g)
    once = archgrid_filter(m)
    assert np.array_equal(archgrid_filter(once).k, once.k)
    diag = np.all(np.isclose(g.nodes, [0.5, 0.5]), axis=1)
    assert np.all(np.isclose(g.nodes[0], [0.25, 0.25]))
    assert len(archgrid_filter(make_members(g, [0], np.flatnonzero(diag)))) == 0


def test_dual_ratio_matches_program():
    g = build_grid(SQ, 0.25)
    rng = np.random.default_rng(0)
    u1, u2, w = rng.normal(size=(3, g.n))
    mt = Metric.slanted(G)
    p = assemble_program(g, neighbor_members(g), np.zeros(g.n), mt, 1e-3)
    Dw, Bu = p.D @ w, p.B1 @ u1 + p.B2 @ u2
    expect = (Dw ** 2 / (4 * p.a) + Bu) / p.b_len
    np.testing.assert_allclose(dual_ratio(p.members, g, u1, u2, w, mt, 1e-3), expect, rtol=1e-13)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_transpose_identity(seed):
    rng = np.random.default_rng(seed)
    g = build_grid(SQ, 0.25)
    p = assemble_program(g, neighbor_members(g), np.zeros(g.n))
    s = rng.normal(size=p.m)
    u1, u2 = rng.normal(size=(2, g.n))
    lhs = (p.B1 @ u1 + p.B2 @ u2) @ s
    rhs = u1 @ (p.B1.T @ s) + u2 @ (p.B2.T @ s)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_eps_shifts_lengths():
    g = build_grid(SQ, 0.5)
    p = assemble_program(g, neighbor_members(g), np.array([-1.0]), eps_perturb=1e-7)
    np.testing.assert_allclose(p.a, p.members.length - 1e-7)
    np.testing.assert_allclose(p.c[1::3], p.members.length - 1e-7)
