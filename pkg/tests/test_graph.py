import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gbrec.graph import (
    BipartiteGraph,
    GroupBuyRecord,
    SocialGraph,
    build_normalized_adjacency,
    partition_views,
)


class TestGroupBuyRecord:
    def test_valid(self):
        r = GroupBuyRecord(0, 3, (2, 1))
        assert r.participants == (2, 1)
        assert r.group_size == 3

    @pytest.mark.parametrize("parts", [(), (1, 1), (0, 1)])
    def test_rejects_bad_participants(self, parts):
        with pytest.raises(ValueError):
            GroupBuyRecord(0, 0, parts)


class TestSocialGraph:
    def test_symmetric_dedup_no_self_loops(self):
        g = SocialGraph.from_edges(4, [(0, 1), (1, 0), (0, 1), (2, 2), (3, 1)])
        assert g.edge_count == 2
        assert g.friends(1).tolist() == [0, 3]
        assert g.friends(2).tolist() == []
        np.testing.assert_array_equal(g.degrees, [1, 2, 0, 1])
        assert g.is_friend(3, 1) and g.is_friend(1, 3)
        assert not g.is_friend(0, 3)
        np.testing.assert_array_equal(g.edges(), [[0, 1], [1, 3]])

    def test_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            SocialGraph.from_edges(2, [(0, 2)])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9)), max_size=40))
    def test_symmetry_property(self, edges):
        g = SocialGraph.from_edges(10, edges)
        expected = {(min(a, b), max(a, b)) for a, b in edges if a != b}
        assert g.edge_count == len(expected)
        for u in range(10):
            for v in g.friends(u):
                assert u in g.friends(int(v))
            assert g.degree(u) == sum(u in e for e in expected)


class TestPartitionViews:
    def test_single_record(self):
        gi, gp = partition_views([GroupBuyRecord(0, 0, (1, 2))], 3, 1)
        assert gi.edge_set() == {(0, 0)}
        assert gp.edge_set() == {(1, 0), (2, 0)}

    def test_duplicates_collapse(self):
        recs = [GroupBuyRecord(0, 0, (1,)), GroupBuyRecord(0, 0, (1,))]
        gi, gp = partition_views(recs, 2, 1)
        assert gi.edge_count == 1 and gp.edge_count == 1

    def test_swapped_roles(self):
        recs = [GroupBuyRecord(0, 0, (1,)), GroupBuyRecord(1, 1, (0,))]
        gi, gp = partition_views(recs, 2, 2)
        assert gi.edge_set() == {(0, 0), (1, 1)}
        assert gp.edge_set() == {(1, 0), (0, 1)}

    def test_out_of_range_names_record(self):
        with pytest.raises(ValueError, match="record 1"):
            partition_views([GroupBuyRecord(0, 0, (1,)), GroupBuyRecord(0, 5, (1,))], 2, 2)

    def test_round_trip(self, rng):
        recs = []
        for _ in range(30):
            u = int(rng.integers(8))
            parts = tuple(int(p) for p in rng.choice([x for x in range(8) if x != u], size=2, replace=False))
            recs.append(GroupBuyRecord(u, int(rng.integers(5)), parts))
        gi, gp = partition_views(recs, 8, 5)
        assert gi.edge_set() == {(r.initiator, r.item) for r in recs}
        assert gp.edge_set() == {(p, r.item) for r in recs for p in r.participants}
        np.testing.assert_array_equal(gi.user_degrees, np.bincount(gi.users, minlength=8))


class TestNormalizedAdjacency:
    def test_single_edge(self):
        adj = build_normalized_adjacency(BipartiteGraph(1, 1, np.array([0]), np.array([0])))
        np.testing.assert_allclose(adj.matrix.toarray(), [[0, 1], [1, 0]])

    def test_shared_item(self):
        adj = build_normalized_adjacency(BipartiteGraph(2, 1, np.array([0, 1]), np.array([0, 0])))
        m = adj.matrix.toarray()
        np.testing.assert_allclose(m[0, 2], 0.70711, atol=1e-5)
        np.testing.assert_allclose(m[1, 2], 1 / np.sqrt(2), atol=1e-12)
        np.testing.assert_allclose(m, m.T, atol=0)

    def test_social_triangle(self):
        adj = build_normalized_adjacency(SocialGraph.from_edges(3, [(0, 1), (1, 2), (0, 2)]))
        np.testing.assert_allclose(adj.matrix.data, 0.5, atol=1e-12)
        assert adj.nnz == 6 and adj.item_count == 0

    def test_star_row_sum(self):
        n = 6
        adj = build_normalized_adjacency(SocialGraph.from_edges(n, [(0, k) for k in range(1, n)]))
        rows = np.asarray(adj.matrix.sum(axis=1)).ravel()
        np.testing.assert_allclose(rows[0], np.sqrt(n - 1), atol=1e-12)

    def test_coefficients_match_degrees(self, rng):
        users = rng.integers(0, 7, size=25)
        items = rng.integers(0, 5, size=25)
        g = BipartiteGraph(7, 5, users, items)
        adj = build_normalized_adjacency(g).matrix.tocoo()
        deg = np.concatenate([g.user_degrees, g.item_degrees])
        for a, b, c in zip(adj.row, adj.col, adj.data):
            assert abs(c - 1 / np.sqrt(deg[a] * deg[b])) < 1e-12
        assert (abs(build_normalized_adjacency(g).matrix - build_normalized_adjacency(g).matrix.T)).nnz == 0

    def test_isolated_rows_empty(self):
        adj = build_normalized_adjacency(BipartiteGraph(3, 2, np.array([0]), np.array([1])))
        assert adj.matrix[1].nnz == 0 and adj.matrix[3].nnz == 0
