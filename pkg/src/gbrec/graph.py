"""Graph data model: group-buying records, social graph, bipartite views.

All graph objects are immutable once built. Users and items are dense
integer indices; the bipartite adjacency is laid out over the stacked node
set ``users + items`` so that a single sparse product propagates messages in
both directions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class GroupBuyRecord:
    """One group-buying event: ``initiator`` bought ``item`` with ``participants``."""

    initiator: int
    item: int
    participants: tuple[int, ...]

    def __post_init__(self):
        parts = tuple(int(p) for p in self.participants)
        object.__setattr__(self, "initiator", int(self.initiator))
        object.__setattr__(self, "item", int(self.item))
        object.__setattr__(self, "participants", parts)
        if not parts:
            raise ValueError("group-buy record needs at least one participant")
        if len(set(parts)) != len(parts):
            raise ValueError(f"duplicate participants in {parts}")
        if self.initiator in parts:
            raise ValueError(f"initiator {self.initiator} listed as its own participant")

    @property
    def group_size(self) -> int:
        return 1 + len(self.participants)


def _csr_structure(n: int, rows: np.ndarray, cols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    return np.cumsum(indptr), cols.astype(np.int64)


@dataclass(frozen=True, eq=False)
class SocialGraph:
    """Undirected, unweighted friendship graph stored as CSR neighbor lists.

    Use :meth:`from_edges` to build one; it symmetrizes, drops self-loops and
    duplicate edges.
    """

    user_count: int
    indptr: np.ndarray
    indices: np.ndarray

    @classmethod
    def from_edges(cls, user_count: int, edges: Iterable[tuple[int, int]]) -> "SocialGraph":
        arr = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
        if arr.size and (arr.min() < 0 or arr.max() >= user_count):
            bad = int(np.flatnonzero((arr < 0).any(1) | (arr >= user_count).any(1))[0])
            raise ValueError(f"social edge {bad} {tuple(arr[bad])} out of range for {user_count} users")
        arr = arr[arr[:, 0] != arr[:, 1]]
        lo = np.minimum(arr[:, 0], arr[:, 1])
        hi = np.maximum(arr[:, 0], arr[:, 1])
        und = np.unique(np.stack([lo, hi], axis=1), axis=0) if len(arr) else arr
        rows = np.concatenate([und[:, 0], und[:, 1]])
        cols = np.concatenate([und[:, 1], und[:, 0]])
        indptr, indices = _csr_structure(user_count, rows, cols)
        return cls(int(user_count), indptr, indices)

    def friends(self, user: int) -> np.ndarray:
        return self.indices[self.indptr[user] : self.indptr[user + 1]]

    def degree(self, user: int) -> int:
        return int(self.indptr[user + 1] - self.indptr[user])

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    @cached_property
    def friend_sets(self) -> tuple[frozenset, ...]:
        return tuple(frozenset(self.friends(u).tolist()) for u in range(self.user_count))

    def is_friend(self, a: int, b: int) -> bool:
        nb = self.friends(a)
        pos = np.searchsorted(nb, b)
        return bool(pos < len(nb) and nb[pos] == b)

    @property
    def edge_count(self) -> int:
        """Number of undirected edges."""
        return len(self.indices) // 2

    def edges(self) -> np.ndarray:
        """Undirected edges as an ``(E, 2)`` array with ``a < b``, sorted."""
        rows = np.repeat(np.arange(self.user_count), self.degrees)
        keep = rows < self.indices
        return np.stack([rows[keep], self.indices[keep]], axis=1)


@dataclass(frozen=True, eq=False)
class BipartiteGraph:
    """Deduplicated user-item edges with per-node degrees."""

    user_count: int
    item_count: int
    users: np.ndarray
    items: np.ndarray
    user_degrees: np.ndarray = field(init=False)
    item_degrees: np.ndarray = field(init=False)

    def __post_init__(self):
        pairs = np.stack([np.asarray(self.users, np.int64), np.asarray(self.items, np.int64)], axis=1)
        pairs = np.unique(pairs.reshape(-1, 2), axis=0)
        object.__setattr__(self, "users", pairs[:, 0].copy())
        object.__setattr__(self, "items", pairs[:, 1].copy())
        object.__setattr__(self, "user_degrees", np.bincount(pairs[:, 0], minlength=self.user_count))
        object.__setattr__(self, "item_degrees", np.bincount(pairs[:, 1], minlength=self.item_count))

    @property
    def edge_count(self) -> int:
        return len(self.users)

    def edge_set(self) -> set[tuple[int, int]]:
        return set(zip(self.users.tolist(), self.items.tolist()))

    def union(self, other: "BipartiteGraph") -> "BipartiteGraph":
        if (self.user_count, self.item_count) != (other.user_count, other.item_count):
            raise ValueError("cannot merge bipartite graphs over different node sets")
        return BipartiteGraph(
            self.user_count,
            self.item_count,
            np.concatenate([self.users, other.users]),
            np.concatenate([self.items, other.items]),
        )


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    """Symmetric degree-normalized adjacency ``D^-1/2 A D^-1/2`` in CSR form.

    ``user_count`` rows come first; for a bipartite view the remaining
    ``item_count`` rows are items. For the social view ``item_count == 0``.
    """

    matrix: sp.csr_matrix
    user_count: int
    item_count: int

    @property
    def n_nodes(self) -> int:
        return self.matrix.shape[0]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def __matmul__(self, other: np.ndarray) -> np.ndarray:
        return self.matrix @ other


def _normalized(n: int, rows: np.ndarray, cols: np.ndarray, deg: np.ndarray) -> sp.csr_matrix:
    vals = 1.0 / np.sqrt(deg[rows].astype(np.float64) * deg[cols].astype(np.float64))
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, n), dtype=np.float64)
    mat.sort_indices()
    return mat


def build_normalized_adjacency(graph: BipartiteGraph | SocialGraph) -> NormalizedAdjacency:
    """Coefficient ``1/sqrt(deg(a) deg(b))`` on every edge in both directions.

    Isolated nodes get empty rows; no self-loops are added.
    """
    if isinstance(graph, SocialGraph):
        n = graph.user_count
        rows = np.repeat(np.arange(n), graph.degrees)
        mat = _normalized(n, rows, graph.indices, graph.degrees)
        return NormalizedAdjacency(mat, n, 0)
    if isinstance(graph, BipartiteGraph):
        nu, ni = graph.user_count, graph.item_count
        deg = np.concatenate([graph.user_degrees, graph.item_degrees])
        u = graph.users
        i = graph.items + nu
        rows = np.concatenate([u, i])
        cols = np.concatenate([i, u])
        return NormalizedAdjacency(_normalized(nu + ni, rows, cols, deg), nu, ni)
    raise TypeError(f"cannot build an adjacency from {type(graph).__name__}")


def partition_views(
    records: Sequence[GroupBuyRecord], user_count: int, item_count: int
) -> tuple[BipartiteGraph, BipartiteGraph]:
    """Split group-buy records into initiator-item and participant-item graphs."""
    init_u, init_i, part_u, part_i = [], [], [], []
    for k, rec in enumerate(records):
        ids = (rec.initiator, *rec.participants)
        if min(ids) < 0 or max(ids) >= user_count:
            raise ValueError(f"record {k}: user id out of range [0, {user_count})")
        if not 0 <= rec.item < item_count:
            raise ValueError(f"record {k}: item id {rec.item} out of range [0, {item_count})")
        init_u.append(rec.initiator)
        init_i.append(rec.item)
        part_u.extend(rec.participants)
        part_i.extend([rec.item] * len(rec.participants))
    g_init = BipartiteGraph(user_count, item_count, np.array(init_u, np.int64), np.array(init_i, np.int64))
    g_part = BipartiteGraph(user_count, item_count, np.array(part_u, np.int64), np.array(part_i, np.int64))
    return g_init, g_part
