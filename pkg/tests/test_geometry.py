import numpy as np
import pytest

from vaultopt.errors import GridInfeasible, SupportHullViolation
from vaultopt.geometry import (PolygonDomain, build_grid, check_hull, enumerate_full_members,
                               members_from_ids, neighbor_members, pair_rank, pair_unrank,
                               segment_in_closure, set_supports)

L_SHAPE = PolygonDomain([[0, 0], [2, 0], [2, 1], [1, 1], [1, 2], [0, 2]])
CROSS = PolygonDomain([[1, 0], [2, 0], [2, 1], [3, 1], [3, 2], [2, 2], [2, 3], [1, 3],
                       [1, 2], [0, 2], [0, 1], [1, 1]])


def test_square_200_counts():
    g = build_grid(PolygonDomain.rectangle(), 1 / 200)
    assert g.nbar == 201 * 201
    assert g.n == 199 ** 2


def test_square_h1_has_no_interior():
    with pytest.raises(GridInfeasible):
        build_grid(PolygonDomain.rectangle(), 1.0)


def test_square_half():
    g = build_grid(PolygonDomain.rectangle(), 0.5)
    assert g.nbar == 9 and g.n == 1
    np.testing.assert_allclose(g.nodes[g.chi[0]], [0.5, 0.5])
    assert check_hull(g)


def test_interior_nodes_row_major_then_boundary():
    g = build_grid(PolygonDomain.rectangle(), 0.25)
    inner = g.nodes[~g.is_boundary]
    assert np.all(~g.is_boundary[: len(inner)])
    key = inner[:, 1] * 10 + inner[:, 0]
    assert np.all(np.diff(key) > 0)


def test_grid_is_deterministic():
    a = build_grid(L_SHAPE, 0.1)
    b = build_grid(L_SHAPE, 0.1)
    assert np.array_equal(a.nodes, b.nodes)


def test_boundary_nodes_on_boundary():
    dom = PolygonDomain.regular_polygon(1.0, 64)
    g = build_grid(dom, 0.1)
    assert np.all(dom.boundary_distance(g.nodes[g.is_boundary]) < 1e-12)
    assert np.all(dom.boundary_distance(g.nodes[~g.is_boundary]) > 1e-10)


def test_polygon_vertices_are_nodes():
    dom = PolygonDomain.regular_polygon(1.0, 7)
    g = build_grid(dom, 0.1)
    d = np.linalg.norm(g.nodes[:, None] - dom.outer_ring[None], axis=2).min(axis=0)
    assert np.all(d < 1e-12)


def test_regular_polygon_circumscribes_the_circle():
    dom = PolygonDomain.regular_polygon(1.0, 256)
    assert dom.boundary_distance(np.zeros((1, 2)))[0] == pytest.approx(1.0, abs=1e-12)


def test_sliver_fails():
    with pytest.raises(GridInfeasible):
        build_grid(PolygonDomain([[0, 0], [1, 0], [1, 1e-3]]), 0.1)


def test_neighbors_3x3():
    g = build_grid(PolygonDomain.rectangle(), 0.5)
    m = neighbor_members(g)
    assert len(m) == 20
    axis = (np.abs(m.cos1) < 1e-12) | (np.abs(m.cos2) < 1e-12)
    assert axis.sum() == 12
    centre = g.chi[0]
    assert np.sum((m.i_minus == centre) | (m.i_plus == centre)) == 8


def test_member_invariants():
    g = build_grid(L_SHAPE, 0.25)
    for block in enumerate_full_members(g, L_SHAPE, chunk=50):
        assert np.all(block.i_minus < block.i_plus)
        assert np.all(block.length > 0)
        np.testing.assert_allclose(block.cos1 ** 2 + block.cos2 ** 2, 1.0, atol=1e-12)


def test_full_count_convex():
    g = build_grid(PolygonDomain.rectangle(), 0.25)
    ks = np.concatenate([b.k for b in enumerate_full_members(g, chunk=37)])
    assert len(ks) == g.nbar * (g.nbar - 1) // 2 == g.full_count
    assert np.all(np.diff(ks) == 1)


def test_three_nodes():
    from vaultopt.geometry import NodeGrid
    g = NodeGrid(np.array([[0.0, 0], [1, 0], [0, 1]]), np.ones(3, bool), np.ones(3, bool), 1.0)
    assert sum(len(b) for b in enumerate_full_members(g)) == 3


def test_ranges_partition_the_stream():
    g = build_grid(L_SHAPE, 0.25)
    whole = np.concatenate([b.k for b in enumerate_full_members(g, L_SHAPE)])
    mid = g.full_count // 3
    parts = np.concatenate([b.k for b in enumerate_full_members(g, L_SHAPE, stop=mid)]
                           + [b.k for b in enumerate_full_members(g, L_SHAPE, start=mid)])
    assert np.array_equal(whole, parts)


def test_l_shape_skips_notch_pairs():
    g = build_grid(L_SHAPE, 0.5)
    i = np.flatnonzero(np.all(np.isclose(g.nodes, [2.0, 1.0]), axis=1))[0]
    j = np.flatnonzero(np.all(np.isclose(g.nodes, [1.0, 2.0]), axis=1))[0]
    k = pair_rank(min(i, j), max(i, j), g.nbar)
    ks = np.concatenate([b.k for b in enumerate_full_members(g, L_SHAPE)])
    assert k not in ks
    # but the pair along the re-entrant edges is kept
    c = np.flatnonzero(np.all(np.isclose(g.nodes, [1.0, 1.0]), axis=1))[0]
    assert pair_rank(min(i, c), max(i, c), g.nbar) in ks


def test_neighbors_are_in_full_set():
    g = build_grid(L_SHAPE, 0.25)
    full = np.concatenate([b.k for b in enumerate_full_members(g, L_SHAPE)])
    assert np.all(np.isin(neighbor_members(g, L_SHAPE).k, full))


def test_segment_in_closure_cases():
    sq = PolygonDomain.rectangle()
    assert segment_in_closure(sq, (0, 0), (1, 1))
    assert segment_in_closure(sq, (1, 0), (0, 1))
    assert segment_in_closure(sq, (0, 0), (1, 0))
    assert not segment_in_closure(CROSS, (1.5, 0), (0, 1.5))
    assert segment_in_closure(CROSS, (1.5, 0), (1.5, 3))
    assert not segment_in_closure(CROSS, (1, 0), (0, 1))


def test_pair_rank_roundtrip(rng):
    nbar = 57
    k = rng.integers(0, nbar * (nbar - 1) // 2, 500)
    i, j = pair_unrank(k, nbar)
    assert np.all(i < j)
    assert np.array_equal(pair_rank(i, j, nbar), k)
    m = members_from_ids(build_grid(PolygonDomain.rectangle(), 1 / 6), np.array([5, 1, 3]))
    assert list(m.k) == [1, 3, 5]


def test_supports_identity():
    g = build_grid(PolygonDomain.rectangle(), 0.25)
    g2 = set_supports(g, np.flatnonzero(g.is_boundary))
    assert np.array_equal(g2.chi, g.chi)


def test_eight_point_supports():
    g = build_grid(PolygonDomain.rectangle(), 0.125)
    pts = [(0, 0), (1, 0), (1, 1), (0, 1), (0.5, 0), (1, 0.5), (0.5, 1), (0, 0.5)]
    idx = [int(np.flatnonzero(np.all(np.isclose(g.nodes, p), axis=1))[0]) for p in pts]
    g2 = set_supports(g, idx)
    assert g2.n == g.nbar - 8
    assert g2.dof[idx].max() == -1


def test_collinear_supports_rejected():
    g = build_grid(PolygonDomain.rectangle(), 0.25)
    with pytest.raises(SupportHullViolation):
        set_supports(g, [0, 1])
