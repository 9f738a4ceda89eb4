"""Deterministic synthetic data.

* :func:`generate_synthetic` -- small group-buy datasets for tests. Group
  sizes follow a heavy-tailed law concentrated on size 2.
* :func:`generate_role_dataset` -- users initiate and participate in disjoint
  topics, so a model that merges the two roles is at a disadvantage.
* :func:`generate_trust_ratings` -- timestamped ratings plus a trust network
  at roughly Ciao scale, for exercising the derivation pipeline end to end.
  Purchases spread through friendships as cascades whose reach depends on
  community ties and on the adopter's participant-role taste.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gbrec.graph import GroupBuyRecord, SocialGraph
from gbrec.ingest import Dataset, RatingEvent, build_dataset


def random_social_graph(n_users: int, friends_per_user: int, rng: np.random.Generator) -> SocialGraph:
    """Near-regular random graph: union of random cycles (plus one matching for odd degree)."""
    if friends_per_user >= n_users:
        raise ValueError("friends_per_user must be smaller than the number of users")
    if friends_per_user < 1:
        raise ValueError("friends_per_user must be >= 1")
    edges: set[tuple[int, int]] = set()

    def link(a, b):
        if a != b:
            edges.add((min(a, b), max(a, b)))

    for _ in range(friends_per_user // 2):
        perm = rng.permutation(n_users)
        for j in range(n_users):
            link(int(perm[j]), int(perm[(j + 1) % n_users]))
    if friends_per_user % 2:
        perm = rng.permutation(n_users)
        for j in range(0, n_users - 1, 2):
            link(int(perm[j]), int(perm[j + 1]))
    return SocialGraph.from_edges(n_users, sorted(edges))


def _participant_counts(law: str, exponent: float, size: int, cap: int, rng) -> np.ndarray:
    support = np.arange(1, max(cap, 1) + 1)
    if law == "zipf":
        w = support.astype(float) ** -exponent
    elif law == "geometric":
        w = exponent ** (support - 1.0)
    else:
        raise ValueError(f"unknown group size law {law!r}")
    return rng.choice(support, size=size, p=w / w.sum())


@dataclass(frozen=True)
class SyntheticConfig:
    users: int = 20
    items: int = 10
    friends_per_user: int = 4
    records: int = 50
    group_size_law: str = "zipf"
    law_parameter: float = 4.5
    latent_dim: int = 4
    temperature: float = 0.5
    seed: int = 7

    def __post_init__(self):
        for name in ("users", "items", "friends_per_user", "records", "latent_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.friends_per_user >= self.users:
            raise ValueError("friends_per_user must be smaller than users")
        if self.records > self.users * self.items:
            raise ValueError("more records than distinct (initiator, item) pairs")


def generate_synthetic(config: SyntheticConfig = SyntheticConfig()) -> Dataset:
    """Random social graph and records with distinct (initiator, item) pairs.

    Participants are drawn from the initiator's friends with probability
    increasing in a latent user-item affinity.
    """
    rng = np.random.default_rng([config.seed, 100])
    social = random_social_graph(config.users, config.friends_per_user, rng)
    taste = rng.normal(size=(config.users, config.latent_dim))
    item_vec = rng.normal(size=(config.items, config.latent_dim))
    usable = np.flatnonzero(social.degrees > 0)
    pairs = [(int(u), i) for u in usable for i in range(config.items)]
    picks = rng.choice(len(pairs), size=config.records, replace=False)
    sizes = _participant_counts(config.group_size_law, config.law_parameter, config.records, 10**6, rng)
    records = []
    for pick, n in zip(np.sort(picks), sizes):
        u, i = pairs[pick]
        friends = social.friends(u)
        n = int(min(n, len(friends)))
        logits = taste[friends] @ item_vec[i] / config.temperature
        p = np.exp(logits - logits.max())
        chosen = rng.choice(friends, size=n, replace=False, p=p / p.sum())
        records.append(GroupBuyRecord(u, i, tuple(sorted(int(c) for c in chosen))))
    return build_dataset(social, records, config.items, seed=config.seed, meta={"generator": "synthetic"})


@dataclass(frozen=True)
class RoleConfig:
    users: int = 300
    items: int = 200
    friends_per_user: int = 12
    records: int = 3000
    topics: int = 6
    fidelity: float = 0.9
    seed: int = 11


def generate_role_dataset(config: RoleConfig = RoleConfig()) -> Dataset:
    """Every user initiates in one topic and joins groups in a different one.

    A record's initiator buys an item from its initiator topic; with
    probability ``fidelity`` the single participant is a friend whose
    participant topic matches the item, otherwise a random friend.
    """
    rng = np.random.default_rng([config.seed, 101])
    social = random_social_graph(config.users, config.friends_per_user, rng)
    t = config.topics
    init_topic = rng.integers(0, t, size=config.users)
    part_topic = (init_topic + rng.integers(1, t, size=config.users)) % t
    item_topic = np.arange(config.items) % t
    by_topic = [np.flatnonzero(item_topic == k) for k in range(t)]
    records = []
    seen = set()
    attempts = 0
    while len(records) < config.records and attempts < 50 * config.records:
        attempts += 1
        u = int(rng.integers(config.users))
        friends = social.friends(u)
        if len(friends) < 2:
            continue
        item = int(rng.choice(by_topic[init_topic[u]]))
        match = friends[part_topic[friends] == item_topic[item]]
        if len(match) and rng.random() < config.fidelity:
            p = int(rng.choice(match))
        else:
            p = int(rng.choice(friends))
        if (u, item, p) in seen:
            continue
        seen.add((u, item, p))
        records.append(GroupBuyRecord(u, item, (p,)))
    return build_dataset(social, records, config.items, seed=config.seed, meta={"generator": "role-split"})


@dataclass(frozen=True)
class TrustRatingsConfig:
    """Defaults land near the Ciao group-buy scale after derivation."""

    users: int = 2400
    communities: int = 48
    intra_degree: float = 34.0
    inter_degree: float = 14.0
    items: int = 6000
    topics: int = 12
    seeds_per_user: float = 9.0
    activity_sigma: float = 0.8
    adopt_rate: float = 0.025
    popularity_sigma: float = 1.0
    intra_tie: float = 1.0
    inter_tie: float = 0.25
    tie_sigma: float = 0.8
    taste_concentration: float = 0.3
    background_per_user: float = 8.0
    horizon: int = 10**8
    seed: int = 2024


def _dirichlet_rows(rng, n, k, alpha, focus):
    base = rng.dirichlet(np.full(k, alpha), size=n)
    out = 0.5 * base
    out[np.arange(n), focus] += 0.5
    return out


def generate_trust_ratings(config: TrustRatingsConfig = TrustRatingsConfig()):
    """Return ``(ratings, trust_edges)`` with raw string ids.

    Users live in communities that are densely connected inside and sparsely
    across. A seed purchase by ``u`` is adopted later by friend ``f`` with
    probability proportional to the tie strength (strong inside a
    community) times the share of ``f``'s participant taste on the item's
    topic. Each user's initiator and participant tastes focus on two
    different random topics. Background purchases add noise.
    """
    c = config
    rng = np.random.default_rng([c.seed, 102])
    n = c.users
    community = np.sort(rng.integers(0, c.communities, size=n))
    members = [np.flatnonzero(community == k) for k in range(c.communities)]

    edges = set()
    for k, mem in enumerate(members):
        m = len(mem)
        if m < 2:
            continue
        p = min(1.0, c.intra_degree / (m - 1))
        iu, ju = np.triu_indices(m, 1)
        keep = rng.random(len(iu)) < p
        for a, b in zip(mem[iu[keep]], mem[ju[keep]]):
            edges.add((int(a), int(b)))
    n_inter = int(n * c.inter_degree / 2)
    a = rng.integers(0, n, size=n_inter)
    b = rng.integers(0, n, size=n_inter)
    for x, y in zip(a, b):
        if x != y and community[x] != community[y]:
            edges.add((int(min(x, y)), int(max(x, y))))
    edges = sorted(edges)
    social = SocialGraph.from_edges(n, edges)

    tie = {}
    strength = rng.lognormal(0.0, c.tie_sigma, size=len(edges))
    for (x, y), s in zip(edges, strength):
        base = c.intra_tie if community[x] == community[y] else c.inter_tie
        tie[(x, y)] = base * s

    shift = rng.integers(1, c.topics, size=n)
    init_focus = rng.integers(0, c.topics, size=n)
    part_focus = (init_focus + shift) % c.topics
    init_taste = _dirichlet_rows(rng, n, c.topics, c.taste_concentration, init_focus)
    part_taste = _dirichlet_rows(rng, n, c.topics, c.taste_concentration, part_focus)
    item_topic = rng.integers(0, c.topics, size=c.items)
    topic_items = [np.flatnonzero(item_topic == k) for k in range(c.topics)]
    topic_pop = [rng.lognormal(0.0, c.popularity_sigma, size=len(ti)) for ti in topic_items]
    topic_pop = [w / w.sum() for w in topic_pop]
    activity = rng.lognormal(0.0, c.activity_sigma, size=n)
    activity *= c.seeds_per_user / activity.mean()

    bought: dict[tuple[int, int], int] = {}

    def buy(u, i, t):
        key = (int(u), int(i))
        if key not in bought or t < bought[key]:
            bought[key] = int(t)

    for u in range(n):
        friends = social.friends(u)
        w = np.array([tie[(min(u, f), max(u, f))] for f in friends])
        for _ in range(rng.poisson(activity[u])):
            topic = rng.choice(c.topics, p=init_taste[u])
            if not len(topic_items[topic]):
                continue
            item = int(rng.choice(topic_items[topic], p=topic_pop[topic]))
            t0 = int(rng.integers(0, c.horizon // 2))
            buy(u, item, t0)
            if not len(friends):
                continue
            p = np.minimum(1.0, c.adopt_rate * w * part_taste[friends, topic] * c.topics)
            adopters = friends[rng.random(len(friends)) < p]
            for f in adopters:
                buy(f, item, t0 + 1 + int(rng.exponential(c.horizon / 50)))

    n_bg = rng.poisson(c.background_per_user * n)
    bg_users = rng.integers(0, n, size=n_bg)
    for u in bg_users:
        topic = rng.choice(c.topics, p=0.5 * init_taste[u] + 0.5 * part_taste[u])
        if len(topic_items[topic]):
            buy(u, int(rng.choice(topic_items[topic], p=topic_pop[topic])), int(rng.integers(0, c.horizon)))

    ratings = [
        RatingEvent(f"u{u}", f"i{i}", float(1 + (u * 31 + i) % 5), t) for (u, i), t in sorted(bought.items())
    ]
    trust = [(f"u{x}", f"u{y}") for x, y in edges]
    return ratings, trust
