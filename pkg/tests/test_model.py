import numpy as np
import pytest

from gbrec.autodiff import ParamStore
from gbrec.graph import BipartiteGraph, SocialGraph, build_normalized_adjacency, partition_views
from gbrec.model import (
    ModelSpec,
    build_query,
    check_params,
    consistency_loss,
    encode_views,
    fuse,
    fuse_all,
    init_params,
    make_batch,
    participant_loss,
    score_candidates,
    total_loss,
)
from helpers import gradcheck_all, toy_model, toy_records, toy_social
from oracles import bipartite_edges, brute_force_propagation, head_average_ref


def view_adjs(records, n_users, n_items, social):
    gi, gp = partition_views(records, n_users, n_items)
    return build_normalized_adjacency(gi), build_normalized_adjacency(gp), build_normalized_adjacency(social)


class TestEncodeViews:
    def test_matches_brute_force(self, rng):
        records, social = toy_records(), toy_social()
        adjs = view_adjs(records, 5, 6, social)
        E = rng.normal(size=(11, 3))
        views = encode_views(ParamStore({"embeddings": E}), *adjs, 3)
        init_edges = bipartite_edges(5, [(r.initiator, r.item) for r in records])
        part_edges = bipartite_edges(5, [(p, r.item) for r in records for p in r.participants])
        zi = brute_force_propagation(11, init_edges, E, 3)
        zp = brute_force_propagation(11, part_edges, E, 3)
        zs = brute_force_propagation(5, social.edges().tolist(), E[:5], 3)
        np.testing.assert_allclose(views.e_u_init, zi[:5], atol=1e-10)
        np.testing.assert_allclose(views.e_i_init, zi[5:], atol=1e-10)
        np.testing.assert_allclose(views.e_up_part, zp[:5], atol=1e-10)
        np.testing.assert_allclose(views.e_i_part, zp[5:], atol=1e-10)
        np.testing.assert_allclose(views.e_u_social, zs, atol=1e-10)

    def test_zero_layers_returns_base(self, rng):
        E = rng.normal(size=(11, 2))
        views = encode_views(ParamStore({"embeddings": E}), *view_adjs(toy_records(), 5, 6, toy_social()), 0)
        np.testing.assert_array_equal(views.e_u_init, E[:5])
        np.testing.assert_array_equal(views.e_i_part, E[5:])
        np.testing.assert_array_equal(views.e_u_social, E[:5])

    def test_isolated_user_keeps_base_row(self, rng):
        social = SocialGraph.from_edges(3, [(0, 1)])
        g = BipartiteGraph(3, 1, np.array([0]), np.array([0]))
        adj = build_normalized_adjacency(g)
        E = rng.normal(size=(4, 2))
        views = encode_views(ParamStore({"embeddings": E}), adj, adj, build_normalized_adjacency(social), 2)
        np.testing.assert_array_equal(views.e_u_init[2], E[2])
        np.testing.assert_array_equal(views.e_u_social[2], E[2])

    def test_path_graph_hand_case(self):
        adj = build_normalized_adjacency(SocialGraph.from_edges(3, [(0, 1), (1, 2)]))
        e = np.array([[1.0], [2.0], [3.0]])
        c = 1 / np.sqrt(2)
        expected = e + np.array([[2 * c], [4 * c], [2 * c]])
        views = encode_views(ParamStore({"embeddings": np.vstack([e, [[0.0]]])}), *[build_normalized_adjacency(BipartiteGraph(3, 1, np.array([0]), np.array([0])))] * 2, adj, 1)
        np.testing.assert_allclose(views.e_u_social, expected, atol=1e-12)


class TestFusion:
    def test_identity_and_examples(self, rng):
        e = rng.normal(size=4)
        np.testing.assert_allclose(fuse(rng.normal(size=4), e, e), e, atol=1e-12)
        np.testing.assert_array_equal(fuse([1, 1], [1, 0], [0, 1]), [0.5, 0.5])
        np.testing.assert_array_equal(fuse([1, 0], [3, 0], [1, 0]), [2.5, 0.0])

    def test_fuse_all(self, rng):
        store = init_params(ModelSpec(5, 6, 3, 1, 1), rng)
        adjs = view_adjs(toy_records(), 5, 6, toy_social())
        views = encode_views(store, *adjs, 1)
        views.e_u_social[:] = 0.0
        views.e_i_part[:] = views.e_i_init
        fused = fuse_all(views, store)
        np.testing.assert_allclose(fused.e_u, views.e_u_init, atol=1e-12)
        np.testing.assert_allclose(fused.e_i, views.e_i_init, atol=1e-12)
        assert fused.e_up.shape == views.e_up_part.shape


class TestQueryAndScoring:
    def test_query(self):
        np.testing.assert_array_equal(build_query(np.ones(2), np.ones(2), np.zeros((2, 4))), [0.5, 0.5])
        W = np.array([[1.0, 0, 0, 0], [0, 0, 0, 1.0]])
        q = build_query(np.array([2.0, 0.0]), np.array([0.0, -2.0]), W)
        np.testing.assert_allclose(q, [0.8808, 0.1192], atol=1e-4)

    def test_query_range(self, rng):
        q = build_query(rng.normal(size=5) * 10, rng.normal(size=5) * 10, rng.normal(size=(5, 10)))
        assert np.all((q > 0) & (q < 1))

    def test_identical_and_single(self, rng):
        q = rng.normal(size=3)
        e = rng.normal(size=3)
        Wq, Wk = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3))
        np.testing.assert_allclose(score_candidates(q, np.stack([e, e]), Wq, Wk), [0.5, 0.5], atol=1e-15)
        assert score_candidates(q, e[None], Wq, Wk).tolist() == [1.0]
        with pytest.raises(ValueError):
            score_candidates(q, np.zeros((0, 3)), Wq, Wk)

    def test_hand_heads(self):
        q = np.array([1.0, 0.5])
        C = np.array([[1.0, 0.0], [0.0, 1.0]])
        Wq = np.array([[[1.0, 0.0], [0.0, 1.0]], [[0.0, 2.0], [1.0, 0.0]]])
        Wk = np.array([[[2.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, -1.0]]])
        # head 1 logits [2, 0.5]; head 2 logits [1, -1]
        s1 = np.exp([2.0, 0.5]) / np.exp([2.0, 0.5]).sum()
        s2 = np.exp([1.0, -1.0]) / np.exp([1.0, -1.0]).sum()
        np.testing.assert_allclose(score_candidates(q, C, Wq, Wk), (s1 + s2) / 2, atol=1e-15)
        np.testing.assert_allclose(score_candidates(q, C, Wq, Wk), head_average_ref(q, C, Wq, Wk), atol=1e-15)

    def test_monotone_in_logit(self, rng):
        q, C = rng.normal(size=3), rng.normal(size=(4, 3))
        Wq = np.stack([np.eye(3)] * 3)
        Wk = np.stack([np.eye(3)] * 3)
        base = score_candidates(q, C, Wq, Wk)
        C2 = C.copy()
        C2[1] += 0.1 * q / np.dot(q, q)
        assert score_candidates(q, C2, Wq, Wk)[1] > base[1]


class TestLosses:
    def test_participant_loss(self):
        assert participant_loss([np.array([1.0])], [np.array([0])]) == 0.0
        assert participant_loss([np.array([0.5, 0.5])], [np.array([0])]) == pytest.approx(0.6931, abs=1e-4)
        assert participant_loss([np.full(3, 1 / 3)], [np.array([0, 2])]) == pytest.approx(2.1972, abs=1e-4)
        assert participant_loss([np.array([0.0, 1.0])], [np.array([0])]) == pytest.approx(-np.log(1e-12))

    def test_consistency(self, rng):
        a = rng.normal(size=4)
        assert consistency_loss(a, a) == pytest.approx(-1.0)
        assert consistency_loss([1.0, 0.0], [0.0, 1.0]) == 0.0
        assert consistency_loss(a, -a) == pytest.approx(1.0)
        assert consistency_loss(3.5 * a, a) == pytest.approx(-1.0)
        assert consistency_loss(np.zeros(4), a) == 0.0

    def test_total(self, rng):
        store = ParamStore({"p": rng.normal(size=3)})
        assert total_loss(2.0, -0.3, store, 0.0, 0.0) == 2.0
        assert total_loss(0.0, -1.0, None, 1.0, 0.0) == -1.0
        assert total_loss(1.0, 0.0, store, 0.0, 0.5) == pytest.approx(1.0 + 0.5 * np.sum(store["p"] ** 2))


class TestBatchedModel:
    def test_matches_reference_path(self):
        model, store, batch = toy_model()
        enc = model.encode(store)
        P = model.predict_proba(store, batch, enc)
        adjs = (model.adj_init, model.adj_part, model.adj_social)
        fused = fuse_all(encode_views(store, *adjs, model.spec.n_layers), store)
        for b, r in enumerate(toy_records()):
            f = toy_social().friends(r.initiator)
            q = build_query(fused.e_u[r.initiator], fused.e_i[r.item], store["W_query"])
            ref = score_candidates(q, fused.e_up[f], store["W_q"], store["W_k"])
            np.testing.assert_allclose(P[b, : len(f)], ref, atol=1e-12)
            assert np.all(P[b, len(f) :] == 0)

    def test_padding_and_per_record_sum(self):
        model, store, batch = toy_model()
        records, social = toy_records(), toy_social()
        parts, _ = model.loss_and_grad(store, batch, 0.0, need_grad=False)
        total = 0.0
        for r in records:
            single = make_batch([r], social)
            np.testing.assert_allclose(
                model.predict_proba(store, single)[0, : single.mask.sum()],
                model.predict_proba(store, batch)[records.index(r), : single.mask.sum()],
                atol=1e-12,
            )
            total += model.loss_and_grad(store, single, 0.0, need_grad=False)[0].part
        assert abs(parts.part - total) < 1e-10

    def test_rows_sum_to_one(self):
        model, store, batch = toy_model()
        np.testing.assert_allclose(model.predict_proba(store, batch).sum(axis=1), 1.0, atol=1e-12)

    def test_rejects_non_friend_truth(self):
        from gbrec.graph import GroupBuyRecord

        with pytest.raises(ValueError, match="not a friend"):
            make_batch([GroupBuyRecord(0, 0, (4,))], toy_social())

    def test_unified_roles_share_embeddings(self):
        model, store, batch = toy_model(unify_roles=True)
        enc = model.encode(store)
        np.testing.assert_array_equal(enc.e_u, enc.e_up)
        parts, _ = model.loss_and_grad(store, batch, 0.5)
        assert parts.consistency == 0.0

    def test_check_params(self):
        spec = ModelSpec(5, 6, 4, 2, 2)
        store = init_params(spec, np.random.default_rng(0))
        check_params(store, spec)
        with pytest.raises(ValueError, match="W_q"):
            check_params(store, ModelSpec(5, 6, 4, 2, 3))


@pytest.mark.parametrize(
    "flags,lam1",
    [
        ({}, 0.5),
        ({"unify_roles": True}, 0.5),
        ({}, 0.0),
        ({"multi_head": False}, 0.5),
        ({"use_query": False}, 0.5),
        ({"shared_embeddings": False}, 0.5),
        ({"n_heads_override": 1}, 0.5),
    ],
)
def test_gradients_every_variant(flags, lam1):
    flags = dict(flags)
    H = flags.pop("n_heads_override", 2)
    model, store, batch = toy_model(H=H, **flags)
    for rep in gradcheck_all(model, store, batch, lam1=lam1):
        assert rep.passed, str(rep)
