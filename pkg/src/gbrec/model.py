"""Multi-view participant scoring model.

Three LightGCN-style views (initiator-item, participant-item, social) share
one layer-0 embedding table. Views are fused per role, the initiator and
item are combined into a query, and friends are scored with multi-head
bilinear attention whose per-head softmaxes are averaged.

The standalone functions (``encode_views``, ``fuse``, ``build_query``,
``score_candidates`` and the losses) are the reference forward pass for a
single record; :class:`MultiViewModel` runs the same computation batched,
with hand-derived gradients for training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gbrec import autodiff as ad
from gbrec.autodiff import ParamStore
from gbrec.graph import (
    NormalizedAdjacency,
    SocialGraph,
    build_normalized_adjacency,
    partition_views,
)

EMBED_KEYS_SHARED = ("embeddings",)
EMBED_KEYS_SPLIT = ("embeddings_init", "embeddings_part", "embeddings_social")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture switches. Each ablation variant flips exactly one of these."""

    n_users: int
    n_items: int
    embedding_dim: int = 32
    n_layers: int = 3
    n_heads: int = 2
    unify_roles: bool = False
    multi_head: bool = True
    use_query: bool = True
    shared_embeddings: bool = True


def _xavier(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_out, fan_in = shape[-2], shape[-1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(spec: ModelSpec, rng: np.random.Generator, init_std: float = 0.01) -> ParamStore:
    """Normal(0, init_std) embeddings, Xavier-uniform matrices, all-ones fusion weights."""
    d, h = spec.embedding_dim, spec.n_heads
    n = spec.n_users + spec.n_items
    store = ParamStore()
    if spec.shared_embeddings:
        store.add("embeddings", rng.normal(0.0, init_std, size=(n, d)))
    else:
        store.add("embeddings_init", rng.normal(0.0, init_std, size=(n, d)))
        store.add("embeddings_part", rng.normal(0.0, init_std, size=(n, d)))
        store.add("embeddings_social", rng.normal(0.0, init_std, size=(spec.n_users, d)))
    for name in ("w_init", "w_part", "w_item"):
        store.add(name, np.ones(d))
    store.add("W_query", _xavier(rng, (d, 2 * d)))
    store.add("W_q", _xavier(rng, (h, d, d)))
    store.add("W_k", _xavier(rng, (h, d, d)))
    return store


def check_params(store: ParamStore, spec: ModelSpec) -> None:
    d, h = spec.embedding_dim, spec.n_heads
    n = spec.n_users + spec.n_items
    expected = {"w_init": (d,), "w_part": (d,), "w_item": (d,), "W_query": (d, 2 * d), "W_q": (h, d, d), "W_k": (h, d, d)}
    if spec.shared_embeddings:
        expected["embeddings"] = (n, d)
    else:
        expected.update({"embeddings_init": (n, d), "embeddings_part": (n, d), "embeddings_social": (spec.n_users, d)})
    for name, shape in expected.items():
        if name not in store:
            raise ValueError(f"missing parameter {name!r}")
        if store[name].shape != shape:
            raise ValueError(f"parameter {name!r} has shape {store[name].shape}, expected {shape}")


# ---------------------------------------------------------------------------
# reference forward pass


@dataclass
class ViewEmbeddings:
    e_u_init: np.ndarray
    e_i_init: np.ndarray
    e_up_part: np.ndarray
    e_i_part: np.ndarray
    e_u_social: np.ndarray


@dataclass
class FusedEmbeddings:
    e_u: np.ndarray
    e_up: np.ndarray
    e_i: np.ndarray


def _layer0(store: ParamStore, view: str) -> np.ndarray:
    if "embeddings" in store:
        return store["embeddings"]
    return store[f"embeddings_{view}"]


def encode_views(
    store: ParamStore,
    adj_init: NormalizedAdjacency,
    adj_part: NormalizedAdjacency,
    adj_social: NormalizedAdjacency,
    n_layers: int,
) -> ViewEmbeddings:
    nu = adj_init.user_count
    z_init = ad.light_conv(adj_init, _layer0(store, "init"), n_layers)
    z_part = ad.light_conv(adj_part, _layer0(store, "part"), n_layers)
    z_soc = ad.light_conv(adj_social, _layer0(store, "social")[:nu], n_layers)
    return ViewEmbeddings(z_init[:nu], z_init[nu:], z_part[:nu], z_part[nu:], z_soc)


def fuse(w: np.ndarray, e1: np.ndarray, e2: np.ndarray) -> np.ndarray:
    return ad.fuse_rows(np.asarray(w, float), np.asarray(e1, float), np.asarray(e2, float))[0]


def fuse_all(views: ViewEmbeddings, store: ParamStore) -> FusedEmbeddings:
    return FusedEmbeddings(
        fuse(store["w_init"], views.e_u_init, views.e_u_social),
        fuse(store["w_part"], views.e_up_part, views.e_u_social),
        fuse(store["w_item"], views.e_i_init, views.e_i_part),
    )


def build_query(e_u: np.ndarray, e_i: np.ndarray, W_query: np.ndarray) -> np.ndarray:
    return ad.sigmoid(ad.matmul(ad.concat(e_u, e_i), W_query.T))


def score_candidates(q: np.ndarray, candidates: np.ndarray, W_q: np.ndarray, W_k: np.ndarray) -> np.ndarray:
    """Average over heads of ``softmax_p((W_q^h q) . (W_k^h e_p))``."""
    candidates = np.atleast_2d(np.asarray(candidates, float))
    if candidates.shape[0] == 0:
        raise ValueError("score_candidates needs at least one candidate")
    W_q = np.asarray(W_q, float).reshape(-1, q.shape[-1], q.shape[-1])
    W_k = np.asarray(W_k, float).reshape(W_q.shape)
    mask = np.ones(candidates.shape[0], dtype=bool)
    probs = np.zeros(candidates.shape[0])
    for wq, wk in zip(W_q, W_k):
        logits = (candidates @ wk.T) @ (wq @ q)
        probs += ad.masked_softmax(logits, mask)
    return probs / W_q.shape[0]


def participant_loss(probabilities: list[np.ndarray], truth_positions: list[np.ndarray]) -> float:
    """Negative log-likelihood of every ground-truth participant (summed)."""
    total = 0.0
    for p, pos in zip(probabilities, truth_positions):
        total -= float(np.sum(np.log(np.maximum(np.asarray(p)[np.asarray(pos)], ad.PROB_FLOOR))))
    return total


def consistency_loss(e_i_init: np.ndarray, e_i_part: np.ndarray) -> float:
    """Mean negative cosine between the two item views; zero-norm rows are skipped."""
    cos, valid = ad.cosine_rows(np.atleast_2d(e_i_init), np.atleast_2d(e_i_part))
    if not valid.any():
        return 0.0
    return float(-cos[valid].mean())


def total_loss(part: float, consistency: float, store: ParamStore | None, lam1: float, lam2: float) -> float:
    value = part + lam1 * consistency
    if lam2 and store is not None:
        value += lam2 * store.squared_norm()
    return value


# ---------------------------------------------------------------------------
# batched model with gradients


@dataclass
class Batch:
    """Rectangular record batch; padding is excluded through the masks.

    ``candidates[b, :]`` lists the initiator's friends (padded with 0) and
    ``truth[b, :]`` holds positions into that row.
    """

    initiators: np.ndarray
    items: np.ndarray
    candidates: np.ndarray
    mask: np.ndarray
    truth: np.ndarray
    truth_mask: np.ndarray
    record_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.initiators)


def make_batch(records, social: SocialGraph, record_ids=None, with_truth: bool = True) -> Batch:
    """Pack records into a :class:`Batch` with the full friend set as candidates."""
    records = list(records)
    n = len(records)
    friends = [social.friends(r.initiator) for r in records]
    width = max((len(f) for f in friends), default=0)
    width = max(width, 1)
    gt_width = max((len(r.participants) for r in records), default=1) if with_truth else 1
    cand = np.zeros((n, width), dtype=np.int64)
    mask = np.zeros((n, width), dtype=bool)
    truth = np.zeros((n, gt_width), dtype=np.int64)
    tmask = np.zeros((n, gt_width), dtype=bool)
    for b, (r, f) in enumerate(zip(records, friends)):
        cand[b, : len(f)] = f
        mask[b, : len(f)] = True
        if with_truth:
            pos = np.searchsorted(f, r.participants)
            if np.any(pos >= len(f)) or np.any(f[np.minimum(pos, len(f) - 1)] != r.participants):
                raise ValueError(f"record {b}: a participant is not a friend of initiator {r.initiator}")
            truth[b, : len(pos)] = pos
            tmask[b, : len(pos)] = True
    ids = np.arange(n) if record_ids is None else np.asarray(record_ids)
    return Batch(
        np.array([r.initiator for r in records], dtype=np.int64),
        np.array([r.item for r in records], dtype=np.int64),
        cand,
        mask,
        truth,
        tmask,
        ids,
    )


@dataclass
class Encoded:
    """Forward state from view encoding and fusion (everything the batch step reuses)."""

    z_init: np.ndarray | None
    z_part: np.ndarray | None
    z_gb: np.ndarray | None
    z_soc: np.ndarray
    e_u: np.ndarray
    e_up: np.ndarray
    e_i: np.ndarray
    fuse_u: ad.FuseCache
    fuse_up: ad.FuseCache | None
    fuse_i: ad.FuseCache | None


@dataclass
class LossParts:
    part: float
    consistency: float
    l2: float
    total: float


class MultiViewModel:
    """Batched forward/backward of the full objective over fixed graphs."""

    def __init__(self, spec: ModelSpec, train_records, social: SocialGraph):
        self.spec = spec
        g_init, g_part = partition_views(train_records, spec.n_users, spec.n_items)
        self.adj_social = build_normalized_adjacency(social)
        if spec.unify_roles:
            self.adj_init = self.adj_part = None
            self.adj_gb = build_normalized_adjacency(g_init.union(g_part))
        else:
            self.adj_init = build_normalized_adjacency(g_init)
            self.adj_part = build_normalized_adjacency(g_part)
            self.adj_gb = None

    # -- encoding -----------------------------------------------------------

    def encode(self, store: ParamStore) -> Encoded:
        s = self.spec
        nu, K = s.n_users, s.n_layers
        z_soc = ad.light_conv(self.adj_social, _layer0(store, "social")[:nu], K)
        if s.unify_roles:
            z_gb = ad.light_conv(self.adj_gb, _layer0(store, "init"), K)
            e_u, c_u = ad.fuse_rows(store["w_init"], z_gb[:nu], z_soc)
            return Encoded(None, None, z_gb, z_soc, e_u, e_u, z_gb[nu:], c_u, None, None)
        z_init = ad.light_conv(self.adj_init, _layer0(store, "init"), K)
        z_part = ad.light_conv(self.adj_part, _layer0(store, "part"), K)
        e_u, c_u = ad.fuse_rows(store["w_init"], z_init[:nu], z_soc)
        e_up, c_up = ad.fuse_rows(store["w_part"], z_part[:nu], z_soc)
        e_i, c_i = ad.fuse_rows(store["w_item"], z_init[nu:], z_part[nu:])
        return Encoded(z_init, z_part, None, z_soc, e_u, e_up, e_i, c_u, c_up, c_i)

    # -- scoring ------------------------------------------------------------

    def _scores(self, store: ParamStore, enc: Encoded, batch: Batch):
        s = self.spec
        d = s.embedding_dim
        x = None
        if s.use_query:
            x = ad.concat(enc.e_u[batch.initiators], enc.e_i[batch.items])
            q = ad.sigmoid(ad.matmul(x, store["W_query"].T))
        else:
            q = enc.e_i[batch.items]
        C = enc.e_up[batch.candidates]
        if s.multi_head:
            Q = np.einsum("hde,be->bhd", store["W_q"], q)
            R = np.einsum("hde,bhd->bhe", store["W_k"], Q)
            logits = np.einsum("bhe,ble->bhl", R, C)
            P_h = ad.masked_softmax(logits, batch.mask[:, None, :])
            P = P_h.mean(axis=1)
        else:
            Q = R = None
            logits = np.einsum("bd,bld->bl", q, C)
            P_h = ad.masked_softmax(logits, batch.mask)[:, None, :]
            P = P_h[:, 0, :]
        return dict(x=x, q=q, C=C, Q=Q, R=R, P_h=P_h, P=P, d=d)

    def predict_proba(self, store: ParamStore, batch: Batch, enc: Encoded | None = None) -> np.ndarray:
        """Averaged candidate probabilities ``(B, L)``; padding columns are 0."""
        enc = enc if enc is not None else self.encode(store)
        return self._scores(store, enc, batch)["P"]

    # -- loss and gradients -------------------------------------------------

    def loss_and_grad(
        self,
        store: ParamStore,
        batch: Batch,
        lam1: float,
        lam2: float = 0.0,
        enc: Encoded | None = None,
        include_l2_grad: bool = True,
        need_grad: bool = True,
    ) -> tuple[LossParts, dict[str, np.ndarray] | None]:
        """Full objective on one batch and its gradient w.r.t. every parameter.

        The consistency term averages over the distinct items of the batch.
        With ``include_l2_grad=False`` the L2 term is left out of the
        gradient (the optimizer adds it) but still reported in the value.
        """
        s = self.spec
        nu = s.n_users
        enc = enc if enc is not None else self.encode(store)
        f = self._scores(store, enc, batch)
        P = f["P"]
        rows = np.repeat(np.arange(len(batch)), batch.truth.shape[1]).reshape(batch.truth.shape)
        p_truth = P[rows, batch.truth]
        live = batch.truth_mask & (p_truth > ad.PROB_FLOOR)
        l_part = float(-np.sum(np.log(np.maximum(p_truth, ad.PROB_FLOOR))[batch.truth_mask]))

        items = np.unique(batch.items)
        cons_valid = None
        l_cons = 0.0
        if not s.unify_roles:
            cos, cons_valid = ad.cosine_rows(enc.z_init[nu + items], enc.z_part[nu + items])
            l_cons = float(-cos[cons_valid].mean()) if cons_valid.any() else 0.0
        l2 = lam2 * store.squared_norm() if lam2 else 0.0
        parts = LossParts(l_part, l_cons, l2, l_part + lam1 * l_cons + l2)
        for name, val in (("participant", l_part), ("consistency", l_cons), ("l2", l2)):
            if not np.isfinite(val):
                raise FloatingPointError(f"non-finite {name} loss ({val})")
        if not need_grad:
            return parts, None

        grads = {name: np.zeros_like(v) for name, v in store.params.items()}

        # NLL -> averaged probabilities -> per-head logits
        gP = np.zeros_like(P)
        np.add.at(gP, (rows[live], batch.truth[live]), -1.0 / p_truth[live])
        H = f["P_h"].shape[1]
        g_logits = ad.masked_softmax_backward(f["P_h"], gP[:, None, :] / H)

        C = f["C"]
        if s.multi_head:
            R, Q = f["R"], f["Q"]
            gR = np.einsum("bhl,bld->bhd", g_logits, C)
            gC = np.einsum("bhl,bhd->bld", g_logits, R)
            grads["W_k"] = np.einsum("bhd,bhe->hde", Q, gR)
            gQ = np.einsum("hde,bhe->bhd", store["W_k"], gR)
            grads["W_q"] = np.einsum("bhd,be->hde", gQ, f["q"])
            gq = np.einsum("hde,bhd->be", store["W_q"], gQ)
        else:
            g_l = g_logits[:, 0, :]
            gC = g_l[:, :, None] * f["q"][:, None, :]
            gq = np.einsum("bl,bld->bd", g_l, C)

        g_e_up = np.zeros_like(enc.e_up)
        np.add.at(g_e_up, batch.candidates[batch.mask], gC[batch.mask])
        g_e_u = np.zeros_like(enc.e_u)
        g_e_i = np.zeros_like(enc.e_i)
        if s.use_query:
            g_pre = ad.sigmoid_backward(f["q"], gq)
            gx, gWT = ad.matmul_backward(f["x"], store["W_query"].T, g_pre)
            grads["W_query"] = gWT.T
            g_eu_rows, g_ei_rows = ad.concat_backward(f["d"], gx)
            np.add.at(g_e_u, batch.initiators, g_eu_rows)
            np.add.at(g_e_i, batch.items, g_ei_rows)
        else:
            np.add.at(g_e_i, batch.items, gq)

        # fusion -> view outputs
        g_soc = np.zeros_like(enc.z_soc)
        if s.unify_roles:
            # e_u and e_up are the same tensor
            gw, g_gb_u, g_s = ad.fuse_rows_backward(enc.fuse_u, g_e_u + g_e_up)
            grads["w_init"] += gw
            g_soc += g_s
            g_gb = np.concatenate([g_gb_u, g_e_i])
            g_x = ad.light_conv_backward(self.adj_gb, g_gb, s.n_layers)
            g_x_init, g_x_part = g_x, None
        else:
            gw, g_zu_init, g_s = ad.fuse_rows_backward(enc.fuse_u, g_e_u)
            grads["w_init"] += gw
            g_soc += g_s
            gw, g_zu_part, g_s = ad.fuse_rows_backward(enc.fuse_up, g_e_up)
            grads["w_part"] += gw
            g_soc += g_s
            gw, g_zi_init, g_zi_part = ad.fuse_rows_backward(enc.fuse_i, g_e_i)
            grads["w_item"] += gw
            g_z_init = np.concatenate([g_zu_init, g_zi_init])
            g_z_part = np.concatenate([g_zu_part, g_zi_part])
            if lam1 and cons_valid is not None and cons_valid.any():
                a, b = enc.z_init[nu + items], enc.z_part[nu + items]
                g_cos = np.where(cons_valid, -lam1 / cons_valid.sum(), 0.0)
                ga, gb = ad.cosine_rows_backward(a, b, g_cos)
                g_z_init[nu + items] += ga
                g_z_part[nu + items] += gb
            g_x_init = ad.light_conv_backward(self.adj_init, g_z_init, s.n_layers)
            g_x_part = ad.light_conv_backward(self.adj_part, g_z_part, s.n_layers)
        g_x_soc = ad.light_conv_backward(self.adj_social, g_soc, s.n_layers)

        if s.shared_embeddings:
            g = g_x_init if g_x_part is None else g_x_init + g_x_part
            g[:nu] += g_x_soc
            grads["embeddings"] = g
        else:
            grads["embeddings_init"] = g_x_init
            if g_x_part is not None:
                grads["embeddings_part"] = g_x_part
            grads["embeddings_social"] = g_x_soc

        if lam2 and include_l2_grad:
            for name, v in store.params.items():
                grads[name] = grads[name] + 2.0 * lam2 * v
        return parts, grads
