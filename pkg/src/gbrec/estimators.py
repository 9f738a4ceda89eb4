"""Participant rankers with a scikit-learn estimator surface.

Every ranker is fitted on a :class:`~gbrec.ingest.Dataset` (its train split
and social graph) and scores an initiator's friends for a target item.
Hyperparameters are plain constructor arguments so ``get_params`` /
``set_params`` / ``clone`` work as usual.
"""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from gbrec.autodiff import AdamState, ParamStore, adam_step, sigmoid
from gbrec.graph import GroupBuyRecord
from gbrec.ingest import Dataset
from gbrec.metrics import RankedList, mean_metrics
from gbrec.model import MultiViewModel, make_batch
from gbrec.training import Checkpoint, TrainConfig, rank_records, train, usable_records
from gbrec.validation import check_candidates, check_dataset, check_records

logger = logging.getLogger(__name__)

BASELINE_STREAM = 3


class ParticipantRanker(BaseEstimator):
    """Shared ranking surface. Subclasses implement ``fit`` and ``score_candidates``."""

    #: tag written into metric reports
    system_name = "ranker"

    def score_candidates(self, initiator: int, item: int, candidates) -> np.ndarray:
        raise NotImplementedError

    def rank(self, record: GroupBuyRecord, record_id: int = 0, candidates=None) -> RankedList:
        """Rank ``candidates`` (default: every friend of the initiator) for one record."""
        check_is_fitted(self, "social_")
        if candidates is None:
            candidates = self.social_.friends(record.initiator)
        candidates = check_candidates(candidates, self.social_.user_count)
        scores = self.score_candidates(record.initiator, record.item, candidates)
        return RankedList.from_scores(record_id, candidates, scores, record.participants)

    def rank_records(self, records: Sequence[GroupBuyRecord]) -> tuple[list[RankedList], int]:
        check_is_fitted(self, "social_")
        keep, skipped = usable_records(records, self.social_)
        return [self.rank(records[k], k) for k in keep], skipped

    def predict(self, records: Sequence[GroupBuyRecord], k: int = 3) -> np.ndarray:
        """Top-``k`` friends per record, padded with -1."""
        records = check_records(records)
        out = np.full((len(records), k), -1, dtype=np.int64)
        ranked, _ = self.rank_records(records)
        for r in ranked:
            top = r.candidates[:k]
            out[r.record_id, : len(top)] = top
        return out

    def score(self, records: Sequence[GroupBuyRecord], k: int = 3) -> float:
        """Mean NDCG@k, so ``GridSearchCV``-style tooling has something to maximize."""
        ranked, _ = self.rank_records(check_records(records))
        return mean_metrics(ranked, ks=(k,))[f"ndcg@{k}"]


class MVPRec(ParticipantRanker):
    """Multi-view graph convolution participant recommender."""

    system_name = "mvprec"

    def __init__(
        self,
        embedding_dim=32,
        n_layers=3,
        n_heads=2,
        lr=5e-3,
        weight_decay=1e-5,
        consistency_weight=0.2,
        batch_size=512,
        max_epochs=300,
        patience=10,
        seed=0,
        init_std=0.01,
        unify_roles=False,
        multi_head=True,
        use_query=True,
        shared_embeddings=True,
        frozen_encoding=False,
    ):
        self.embedding_dim = embedding_dim
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.lr = lr
        self.weight_decay = weight_decay
        self.consistency_weight = consistency_weight
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.seed = seed
        self.init_std = init_std
        self.unify_roles = unify_roles
        self.multi_head = multi_head
        self.use_query = use_query
        self.shared_embeddings = shared_embeddings
        self.frozen_encoding = frozen_encoding

    @property
    def config(self) -> TrainConfig:
        return TrainConfig(**self.get_params())

    def fit(self, dataset: Dataset, y=None):
        dataset = check_dataset(dataset)
        result = train(dataset, self.config)
        self._attach(result.checkpoint, dataset)
        self.result_ = result
        self.history_ = result.history
        return self

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, dataset: Dataset) -> "MVPRec":
        """Rebuild a fitted ranker; ``dataset`` supplies the train graphs the views are built from."""
        est = cls(**checkpoint.config.to_dict())
        est._attach(checkpoint, check_dataset(dataset))
        return est

    def _attach(self, checkpoint: Checkpoint, dataset: Dataset) -> None:
        self.checkpoint_ = checkpoint
        self.store_ = checkpoint.store()
        self.model_ = MultiViewModel(checkpoint.spec, dataset.train, dataset.social)
        self.encoded_ = self.model_.encode(self.store_)
        self.social_ = dataset.social

    def score_candidates(self, initiator, item, candidates):
        check_is_fitted(self, "store_")
        candidates = check_candidates(candidates, self.social_.user_count)
        batch = make_batch([_Probe(initiator, item)], _FixedFriends(candidates, self.social_.user_count), with_truth=False)
        return self.model_.predict_proba(self.store_, batch, self.encoded_)[0, : len(candidates)]

    def rank_records(self, records):
        check_is_fitted(self, "store_")
        return rank_records(self.model_, self.store_, records, self.social_)


class _Probe:
    """Minimal record stand-in for scoring an arbitrary candidate list."""

    def __init__(self, initiator, item):
        self.initiator = int(initiator)
        self.item = int(item)
        self.participants = ()


class _FixedFriends:
    def __init__(self, candidates, user_count):
        self._c = np.asarray(candidates, dtype=np.int64)
        self.user_count = user_count

    def friends(self, user):
        return self._c


class UserActivity(ParticipantRanker):
    """Scores a friend by its number of training purchases (either role)."""

    system_name = "user-activity"

    def fit(self, dataset: Dataset, y=None):
        dataset = check_dataset(dataset)
        counts = np.zeros(dataset.user_count, dtype=np.int64)
        for r in dataset.train:
            counts[r.initiator] += 1
            for p in r.participants:
                counts[p] += 1
        self.counts_ = counts
        self.social_ = dataset.social
        return self

    def score_candidates(self, initiator, item, candidates):
        check_is_fitted(self, "counts_")
        return self.counts_[np.asarray(candidates, dtype=np.int64)].astype(np.float64)


class CosineSimilarity(ParticipantRanker):
    """Cosine between binary train-interaction vectors of initiator and friend."""

    system_name = "cosine"

    def fit(self, dataset: Dataset, y=None):
        dataset = check_dataset(dataset)
        rows, cols = [], []
        for r in dataset.train:
            for u in (r.initiator, *r.participants):
                rows.append(u)
                cols.append(r.item)
        mat = sp.csr_matrix(
            (np.ones(len(rows)), (rows, cols)), shape=(dataset.user_count, dataset.item_count)
        )
        mat.data[:] = 1.0  # duplicates summed above; binarize
        norms = np.sqrt(np.asarray(mat.multiply(mat).sum(axis=1)).ravel())
        inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
        self.vectors_ = sp.diags(inv) @ mat
        self.vectors_ = self.vectors_.tocsr()
        self.social_ = dataset.social
        return self

    def score_candidates(self, initiator, item, candidates):
        check_is_fitted(self, "vectors_")
        cand = np.asarray(candidates, dtype=np.int64)
        sims = self.vectors_[cand] @ self.vectors_[initiator].T
        return np.asarray(sims.todense()).ravel()


class MFBPR(ParticipantRanker):
    """Matrix factorization trained with BPR; a friend scores ``e_item . e_friend``.

    Positives are every (user, item) purchase in train, in either role. Each
    positive is contrasted with one uniformly drawn negative *user* for the
    same item, matching how the scores are used (ranking users for an item).
    """

    system_name = "mf-bpr"

    def __init__(
        self,
        embedding_dim=32,
        lr=1e-2,
        weight_decay=1e-5,
        batch_size=1024,
        max_epochs=200,
        patience=10,
        seed=0,
        init_std=0.1,
    ):
        self.embedding_dim = embedding_dim
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.seed = seed
        self.init_std = init_std

    def fit(self, dataset: Dataset, y=None):
        dataset = check_dataset(dataset)
        self.social_ = dataset.social
        rng = np.random.default_rng([int(self.seed), BASELINE_STREAM])
        d = self.embedding_dim
        store = ParamStore(
            {
                "users": rng.normal(0.0, self.init_std, size=(dataset.user_count, d)),
                "items": rng.normal(0.0, self.init_std, size=(dataset.item_count, d)),
            }
        )
        pairs = np.array(
            [(u, r.item) for r in dataset.train for u in (r.initiator, *r.participants)], dtype=np.int64
        ).reshape(-1, 2)
        state = AdamState()
        self.store_ = store
        history, best, best_params, since = [], None, store.state_dict(), 0
        for epoch in range(1, self.max_epochs + 1):
            order = rng.permutation(len(pairs))
            negs = rng.integers(0, dataset.user_count, size=len(pairs))
            total = 0.0
            for start in range(0, len(order), self.batch_size):
                idx = order[start : start + self.batch_size]
                loss, grads = bpr_loss_and_grad(store, pairs[idx, 0], pairs[idx, 1], negs[idx])
                total += loss
                store.accumulate(grads)
                adam_step(store, state, self.lr, self.weight_decay)
            entry = {"epoch": epoch, "loss_bpr": total, "valid": None}
            if dataset.valid:
                ranked, _ = self.rank_records(dataset.valid)
                entry["valid"] = mean_metrics(ranked)
                score = entry["valid"]["ndcg@3"]
                if best is None or score > best:
                    best, best_params, since = score, store.state_dict(), 0
                else:
                    since += 1
            else:
                best_params = store.state_dict()
            history.append(entry)
            if dataset.valid and since > self.patience:
                break
        self.store_ = ParamStore(best_params)
        self.history_ = history
        self.best_valid_ = best
        return self

    def score_candidates(self, initiator, item, candidates):
        check_is_fitted(self, "store_")
        cand = np.asarray(candidates, dtype=np.int64)
        return self.store_["users"][cand] @ self.store_["items"][item]


def bpr_loss_and_grad(store: ParamStore, users, items, negatives):
    """``-sum ln sigmoid(e_i . e_u - e_i . e_n)`` and its gradients."""
    U, I = store["users"], store["items"]
    eu, en, ei = U[users], U[negatives], I[items]
    diff = eu - en
    x = np.einsum("bd,bd->b", ei, diff)
    s = sigmoid(x)
    loss = float(-np.sum(np.log(np.maximum(s, 1e-300))))
    g = -(1.0 - s)[:, None]
    gU = np.zeros_like(U)
    gI = np.zeros_like(I)
    np.add.at(gI, items, g * diff)
    np.add.at(gU, users, g * ei)
    np.add.at(gU, negatives, -g * ei)
    return loss, {"users": gU, "items": gI}


BASELINES = {"activity": UserActivity, "cosine": CosineSimilarity, "mf": MFBPR}
