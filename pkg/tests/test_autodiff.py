import numpy as np
import pytest

from gbrec import autodiff as ad
from gbrec.graph import SocialGraph, build_normalized_adjacency
from oracles import brute_force_propagation, fuse_ref


def social_adj(n, edges):
    return build_normalized_adjacency(SocialGraph.from_edges(n, edges))


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f(x)
        flat[k] = orig - h
        fm = f(x)
        flat[k] = orig
        g.reshape(-1)[k] = (fp - fm) / (2 * h)
    return g


class TestPropagation:
    def test_empty_adjacency(self):
        X = np.arange(6.0).reshape(3, 2)
        np.testing.assert_array_equal(ad.sparse_propagate(social_adj(3, []), X), np.zeros((3, 2)))

    def test_single_edge_swaps_rows(self):
        X = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ad.sparse_propagate(social_adj(2, [(0, 1)]), X), X[::-1])

    def test_random_graph_matches_brute_force(self, rng):
        edges = [(a, b) for a in range(15) for b in range(a + 1, 15) if rng.random() < 0.25]
        X = rng.normal(size=(15, 3))
        adj = social_adj(15, edges)
        np.testing.assert_allclose(ad.sparse_propagate(adj, X), brute_force_propagation(15, edges, X, 1) - X, atol=1e-10)
        np.testing.assert_allclose(ad.light_conv(adj, X, 3), brute_force_propagation(15, edges, X, 3), atol=1e-10)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.sparse_propagate(social_adj(3, [(0, 1)]), np.zeros((4, 2)))

    def test_light_conv_backward_is_adjoint(self, rng):
        edges = [(a, b) for a in range(8) for b in range(a + 1, 8) if rng.random() < 0.4]
        adj = social_adj(8, edges)
        X, G = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
        lhs = np.sum(ad.light_conv(adj, X, 2) * G)
        rhs = np.sum(X * ad.light_conv_backward(adj, G, 2))
        assert abs(lhs - rhs) < 1e-12


class TestDenseOps:
    def test_sigmoid(self):
        assert ad.sigmoid(np.array(0.0)) == 0.5
        big = ad.sigmoid(np.array([-800.0, 800.0]))
        assert np.all(np.isfinite(big)) and big[0] == 0.0 and big[1] == 1.0

    def test_matmul_identity(self, rng):
        B = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(ad.matmul(np.eye(3), B), B)

    def test_dot_gradient(self, rng):
        a, b = rng.normal(size=5), rng.normal(size=5)
        ga, gb = ad.dot_backward(a, b, np.array(1.0))
        np.testing.assert_array_equal(ga, b)
        num = numeric_grad(lambda x: float(ad.dot(x, b)), a.copy())
        assert np.max(np.abs(ga - num) / np.maximum(1, np.abs(num))) < 1e-5

    def test_matmul_sigmoid_concat_chain(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        W = rng.normal(size=(6, 4))
        G = rng.normal(size=(2, 4))

        def f(W_):
            return float(np.sum(ad.sigmoid(ad.matmul(ad.concat(a, b), W_)) * G))

        y = ad.sigmoid(ad.matmul(ad.concat(a, b), W))
        gz = ad.sigmoid_backward(y, G)
        gx, gW = ad.matmul_backward(ad.concat(a, b), W, gz)
        ga, gb = ad.concat_backward(3, gx)
        np.testing.assert_allclose(gW, numeric_grad(f, W.copy()), atol=1e-7)
        np.testing.assert_allclose(ga, numeric_grad(lambda a_: float(np.sum(ad.sigmoid(ad.matmul(ad.concat(a_, b), W)) * G)), a.copy()), atol=1e-7)
        assert gb.shape == b.shape

    def test_scale_add_scatter(self):
        np.testing.assert_array_equal(ad.scale(np.ones(2), 3.0), [3.0, 3.0])
        np.testing.assert_array_equal(ad.add(np.ones(2), np.ones(2)), [2.0, 2.0])
        out = ad.scatter_rows(3, np.array([0, 2, 0]), np.ones((3, 2)))
        np.testing.assert_array_equal(out, [[2, 2], [0, 0], [1, 1]])


class TestFusion:
    def test_hand_example(self):
        out, cache = ad.fuse_rows(np.array([1.0, 0.0]), np.array([3.0, 0.0]), np.array([1.0, 0.0]))
        assert cache.a1 == 0.75
        np.testing.assert_array_equal(out, [2.5, 0.0])

    def test_symmetric_case(self):
        out, _ = ad.fuse_rows(np.ones(2), np.array([1.0, 0.0]), np.array([0.0, 1.0]))
        np.testing.assert_array_equal(out, [0.5, 0.5])

    def test_guard(self):
        out, cache = ad.fuse_rows(np.array([1.0, 1.0]), np.array([1.0, 0.0]), np.array([-1.0, 0.0]))
        assert cache.guarded and cache.a1 == 0.5
        np.testing.assert_array_equal(out, [0.0, 0.0])

    def test_matches_reference_rows(self, rng):
        w, e1, e2 = rng.normal(size=4), rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
        out, _ = ad.fuse_rows(w, e1, e2)
        for k in range(6):
            np.testing.assert_allclose(out[k], fuse_ref(w, e1[k], e2[k]), atol=1e-12)

    def test_backward(self, rng):
        w = rng.normal(size=3) + 1.0
        e1, e2 = rng.normal(size=(4, 3)) + 1.0, rng.normal(size=(4, 3)) + 1.0
        G = rng.normal(size=(4, 3))
        _, cache = ad.fuse_rows(w, e1, e2)
        g_w, g_e1, g_e2 = ad.fuse_rows_backward(cache, G)

        def f(w_=w, e1_=e1, e2_=e2):
            return float(np.sum(ad.fuse_rows(w_, e1_, e2_)[0] * G))

        for got, num in (
            (g_w, numeric_grad(lambda x: f(w_=x), w.copy())),
            (g_e1, numeric_grad(lambda x: f(e1_=x), e1.copy())),
            (g_e2, numeric_grad(lambda x: f(e2_=x), e2.copy())),
        ):
            assert np.max(np.abs(got - num) / np.maximum(1, np.abs(num))) < 1e-6


class TestSoftmaxCosine:
    def test_masked_softmax_ignores_padding(self):
        p = ad.masked_softmax(np.array([[1.0, 2.0, 50.0]]), np.array([[True, True, False]]))
        np.testing.assert_allclose(p, [[1 / (1 + np.e), np.e / (1 + np.e), 0.0]], atol=1e-15)

    def test_softmax_backward(self, rng):
        z = rng.normal(size=5)
        mask = np.array([True, True, False, True, True])
        G = rng.normal(size=5)
        p = ad.masked_softmax(z, mask)
        got = ad.masked_softmax_backward(p, G)
        num = numeric_grad(lambda x: float(np.sum(ad.masked_softmax(x, mask) * G)), z.copy())
        np.testing.assert_allclose(got, num, atol=1e-8)
        assert got[2] == 0.0

    def test_cosine(self, rng):
        a = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
        b = np.array([[2.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [1.0, 0.0]])
        cos, valid = ad.cosine_rows(a, b)
        np.testing.assert_allclose(cos, [1.0, 0.0, -1.0, 0.0])
        np.testing.assert_array_equal(valid, [True, True, True, False])
        x, y, G = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=3)
        ga, gb = ad.cosine_rows_backward(x, y, G)
        np.testing.assert_allclose(ga, numeric_grad(lambda v: float(np.sum(ad.cosine_rows(v, y)[0] * G)), x.copy()), atol=1e-8)
        np.testing.assert_allclose(gb, numeric_grad(lambda v: float(np.sum(ad.cosine_rows(x, v)[0] * G)), y.copy()), atol=1e-8)


class TestParamStoreAndAdam:
    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            ad.ParamStore({"p": [np.nan]})

    def test_zero_gradient_no_change(self):
        store = ad.ParamStore({"p": [1.0, -2.0]})
        ad.adam_step(store, ad.AdamState(), lr=0.1)
        np.testing.assert_array_equal(store["p"], [1.0, -2.0])

    def test_descends_quadratic(self):
        store = ad.ParamStore({"p": [1.0]})
        store.accumulate({"p": 2 * store["p"]})
        ad.adam_step(store, ad.AdamState(), lr=0.1)
        assert store["p"][0] < 1.0
        np.testing.assert_allclose(store["p"], [0.9], atol=1e-7)
        assert store.grads["p"][0] == 0.0

    def test_coupled_weight_decay(self):
        # with zero loss gradient the decay alone drives theta toward 0
        store = ad.ParamStore({"p": [1.0]})
        ad.adam_step(store, ad.AdamState(), lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(store["p"], [0.9], atol=1e-7)

    def test_non_finite_gradient_aborts(self):
        store = ad.ParamStore({"p": [1.0, 2.0]})
        store.grads["p"][1] = np.inf
        with pytest.raises(FloatingPointError, match="index"):
            ad.adam_step(store, ad.AdamState(), lr=0.1)
        np.testing.assert_array_equal(store["p"], [1.0, 2.0])

    def test_deterministic(self):
        def run():
            r = np.random.default_rng(3)
            store = ad.ParamStore({"p": r.normal(size=10)})
            state = ad.AdamState()
            for _ in range(50):
                store.accumulate({"p": np.sin(store["p"]) + store["p"] ** 3})
                ad.adam_step(store, state, lr=0.01, weight_decay=1e-3)
            return store["p"]

        assert run().tobytes() == run().tobytes()


class TestFiniteDifference:
    def test_quadratic(self, rng):
        store = ad.ParamStore({"p": rng.normal(size=(3, 4))})
        rep = ad.finite_difference_check(lambda s: (0.5 * float(np.sum(s["p"] ** 2)), {"p": s["p"].copy()}), store, "p", n_samples=None)
        assert rep.passed and rep.max_error < 1e-8 and rep.checked == 12

    def test_constant(self):
        store = ad.ParamStore({"p": np.ones(5)})
        rep = ad.finite_difference_check(lambda s: (3.0, {"p": np.zeros(5)}), store, "p")
        assert rep.max_error < 1e-8

    def test_detects_wrong_gradient(self):
        store = ad.ParamStore({"p": np.ones(3)})
        rep = ad.finite_difference_check(lambda s: (float(np.sum(s["p"] ** 2)), {"p": s["p"].copy()}), store, "p")
        assert not rep.passed and "FAIL" in str(rep)

    def test_restores_parameters(self, rng):
        p = rng.normal(size=6)
        store = ad.ParamStore({"p": p})
        ad.finite_difference_check(lambda s: (float(np.sum(np.sin(s["p"]))), {"p": np.cos(s["p"])}), store, "p")
        np.testing.assert_array_equal(store["p"], p)
