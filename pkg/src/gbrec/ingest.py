"""Dataset ingestion: parsing, group-buy derivation, filtering, splitting, stats.

Text formats (UTF-8, tab separated):

* social file: ``<user_a>\\t<user_b>`` per line
* group-buy file: ``<initiator>\\t<item>\\t<p1,p2,...>`` per line
* ratings file: ``<user>\\t<item>\\t<rating>\\t<timestamp>`` per line

Raw ids are arbitrary strings and are remapped to dense indices in order of
first appearance (social file first, then records).
"""

from __future__ import annotations

import hashlib
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from gbrec import container
from gbrec.graph import GroupBuyRecord, SocialGraph

logger = logging.getLogger(__name__)

SPLIT_STREAM = 0


class FormatError(ValueError):
    """A data file line could not be parsed."""

    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class IdMap:
    """Raw-id to dense-index mapping that grows on first sight."""

    def __init__(self, raw_ids: Iterable[str] = ()):
        self._index: dict[str, int] = {}
        self.raw: list[str] = []
        for r in raw_ids:
            self.add(r)

    def add(self, raw: str) -> int:
        idx = self._index.get(raw)
        if idx is None:
            idx = self._index[raw] = len(self.raw)
            self.raw.append(raw)
        return idx

    def get(self, raw: str) -> int | None:
        return self._index.get(raw)

    def __getitem__(self, raw: str) -> int:
        return self._index[raw]

    def __contains__(self, raw: str) -> bool:
        return raw in self._index

    def __len__(self) -> int:
        return len(self.raw)


@dataclass(frozen=True)
class RatingEvent:
    user: str
    item: str
    rating: float
    timestamp: int

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Remapped users/items, symmetric social graph and train/valid/test records.

    ``raw_records`` holds the records before friend filtering when known;
    statistics use it for the social ratio.
    """

    user_count: int
    item_count: int
    social: SocialGraph
    train: tuple[GroupBuyRecord, ...]
    valid: tuple[GroupBuyRecord, ...]
    test: tuple[GroupBuyRecord, ...]
    user_ids: tuple[str, ...] = ()
    item_ids: tuple[str, ...] = ()
    raw_records: tuple[GroupBuyRecord, ...] | None = None
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> tuple[GroupBuyRecord, ...]:
        if name not in ("train", "valid", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    @property
    def records(self) -> tuple[GroupBuyRecord, ...]:
        return self.train + self.valid + self.test

    # -- bundle I/O ---------------------------------------------------------

    def to_bytes(self) -> bytes:
        tensors = {"social_edges": self.social.edges()}
        groups = {"train": self.train, "valid": self.valid, "test": self.test}
        if self.raw_records is not None:
            groups["raw"] = self.raw_records
        for name, recs in groups.items():
            tensors.update(_pack_records(name, recs))
        meta = {
            "user_count": self.user_count,
            "item_count": self.item_count,
            "user_ids": list(self.user_ids),
            "item_ids": list(self.item_ids),
            "has_raw": self.raw_records is not None,
            "info": self.meta,
        }
        return container.dumps("dataset", tensors, meta)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Dataset":
        tensors, meta = container.loads(data, kind="dataset")
        social = SocialGraph.from_edges(meta["user_count"], map(tuple, tensors["social_edges"]))
        unpack = {name: _unpack_records(name, tensors) for name in ("train", "valid", "test")}
        raw = _unpack_records("raw", tensors) if meta["has_raw"] else None
        return cls(
            meta["user_count"],
            meta["item_count"],
            social,
            unpack["train"],
            unpack["valid"],
            unpack["test"],
            tuple(meta["user_ids"]),
            tuple(meta["item_ids"]),
            raw,
            meta.get("info", {}),
        )

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        return cls.from_bytes(Path(path).read_bytes())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def _pack_records(prefix: str, records: Sequence[GroupBuyRecord]) -> dict[str, np.ndarray]:
    offsets = np.zeros(len(records) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(r.participants) for r in records])
    flat = [p for r in records for p in r.participants]
    return {
        f"{prefix}.initiator": np.array([r.initiator for r in records], dtype=np.int64),
        f"{prefix}.item": np.array([r.item for r in records], dtype=np.int64),
        f"{prefix}.offsets": offsets,
        f"{prefix}.participants": np.array(flat, dtype=np.int64),
    }


def _unpack_records(prefix: str, tensors) -> tuple[GroupBuyRecord, ...]:
    init = tensors[f"{prefix}.initiator"].tolist()
    item = tensors[f"{prefix}.item"].tolist()
    off = tensors[f"{prefix}.offsets"].tolist()
    flat = tensors[f"{prefix}.participants"].tolist()
    return tuple(GroupBuyRecord(init[k], item[k], tuple(flat[off[k] : off[k + 1]])) for k in range(len(init)))


# ---------------------------------------------------------------------------
# parsing


def _lines(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield lineno, line


def read_social(path: str | Path) -> list[tuple[str, str]]:
    edges = []
    for lineno, line in _lines(path):
        cols = line.split("\t")
        if len(cols) < 2 or not cols[0] or not cols[1]:
            raise FormatError(path, lineno, "expected '<user_a>\\t<user_b>'")
        edges.append((cols[0].strip(), cols[1].strip()))
    return edges


def read_group_buys(path: str | Path) -> list[tuple[str, str, tuple[str, ...]]]:
    out = []
    for lineno, line in _lines(path):
        cols = line.split("\t")
        if len(cols) != 3:
            raise FormatError(path, lineno, "expected '<initiator>\\t<item>\\t<p1,p2,...>'")
        parts = tuple(p.strip() for p in cols[2].split(",") if p.strip())
        if not parts:
            raise FormatError(path, lineno, "empty participant list")
        if len(set(parts)) != len(parts) or cols[0].strip() in parts:
            raise FormatError(path, lineno, "participants must be distinct and exclude the initiator")
        out.append((cols[0].strip(), cols[1].strip(), parts))
    return out


def read_ratings(path: str | Path) -> list[RatingEvent]:
    out = []
    for lineno, line in _lines(path):
        cols = line.split("\t")
        if len(cols) != 4:
            raise FormatError(path, lineno, "expected '<user>\\t<item>\\t<rating>\\t<timestamp>'")
        try:
            out.append(RatingEvent(cols[0].strip(), cols[1].strip(), float(cols[2]), int(cols[3])))
        except ValueError as exc:
            raise FormatError(path, lineno, str(exc)) from None
    return out


def load_group_buy_dataset(social_path, records_path):
    """Parse a social file and a group-buy file into dense ids.

    Returns ``(social, records, users, items)``; participants that never
    appear in the social file become isolated users.
    """
    users, items = IdMap(), IdMap()
    raw_edges = read_social(social_path)
    for a, b in raw_edges:
        users.add(a)
        users.add(b)
    raw = read_group_buys(records_path)
    records = []
    for init, item, parts in raw:
        records.append(GroupBuyRecord(users.add(init), items.add(item), tuple(users.add(p) for p in parts)))
    social = SocialGraph.from_edges(len(users), [(users[a], users[b]) for a, b in raw_edges])
    return social, records, users, items


# ---------------------------------------------------------------------------
# derivation from ratings + trust


def derive_group_buys(
    ratings: Sequence[RatingEvent],
    trust_edges: Iterable[tuple[str, str]],
    users: IdMap | None = None,
    items: IdMap | None = None,
) -> list[GroupBuyRecord]:
    """Group-buy records from timestamped purchases and (undirected) trust edges.

    Per item, purchasers are visited in (timestamp, raw user id) order. The
    earliest unassigned purchaser becomes an initiator and every unassigned
    friend who bought strictly later joins as a participant; the group is
    emitted if it has participants and the process repeats on whoever is
    left. Repeat purchases keep the earliest timestamp.

    ``users`` and ``items`` are filled in place when given, so callers can
    recover the raw ids.
    """
    users = users if users is not None else IdMap()
    items = items if items is not None else IdMap()
    friends: dict[str, set[str]] = defaultdict(set)
    for a, b in trust_edges:
        if a != b:
            friends[a].add(b)
            friends[b].add(a)

    first: dict[str, dict[str, int]] = defaultdict(dict)
    for ev in ratings:
        seen = first[ev.item]
        if ev.user not in seen or ev.timestamp < seen[ev.user]:
            seen[ev.user] = ev.timestamp

    records = []
    for item in sorted(first):
        buyers = sorted(first[item].items(), key=lambda kv: (kv[1], kv[0]))
        remaining = buyers
        while len(remaining) > 1:
            init, t0 = remaining[0]
            circle = friends.get(init, ())
            parts = [u for u, t in remaining[1:] if t > t0 and u in circle]
            taken = set(parts)
            taken.add(init)
            remaining = [(u, t) for u, t in remaining if u not in taken]
            if parts:
                records.append(
                    GroupBuyRecord(users.add(init), items.add(item), tuple(users.add(p) for p in parts))
                )
    return records


# ---------------------------------------------------------------------------
# filtering and splitting


def load_ratings_dataset(ratings_path, trust_path):
    """Parse ratings and trust files and derive group buys.

    Returns ``(social, records, users, items)``. Only items that occur in a
    derived record receive an id.
    """
    trust = read_social(trust_path)
    ratings = read_ratings(ratings_path)
    users, items = IdMap(), IdMap()
    for a, b in trust:
        users.add(a)
        users.add(b)
    records = derive_group_buys(ratings, trust, users, items)
    social = SocialGraph.from_edges(len(users), [(users[a], users[b]) for a, b in trust])
    return social, records, users, items


def filter_friend_participants(records: Iterable[GroupBuyRecord], social: SocialGraph) -> list[GroupBuyRecord]:
    """Drop non-friend participants; drop records left without participants."""
    sets = social.friend_sets
    out = []
    for r in records:
        circle = sets[r.initiator]
        kept = tuple(p for p in r.participants if p in circle)
        if len(kept) == len(r.participants):
            out.append(r)
        elif kept:
            out.append(GroupBuyRecord(r.initiator, r.item, kept))
    return out


def _rng(seed, stream: int) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng([int(seed), stream])


def split_dataset(records: Sequence[GroupBuyRecord], ratios=(0.8, 0.1, 0.1), seed=0):
    """Random per-initiator split into ``(train, valid, test)``.

    Initiators with fewer than three records keep everything in train. For
    the rest, validation and test each get ``max(1, round(n * ratio))``
    records. Each split preserves input order.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = _rng(seed, SPLIT_STREAM)
    by_init: dict[int, list[int]] = defaultdict(list)
    for k, r in enumerate(records):
        by_init[r.initiator].append(k)
    assign = np.zeros(len(records), dtype=np.int8)
    for init in sorted(by_init):
        idx = by_init[init]
        n = len(idx)
        if n < 3:
            continue
        n_valid = max(1, int(np.floor(n * ratios[1] + 0.5))) if ratios[1] > 0 else 0
        n_test = max(1, int(np.floor(n * ratios[2] + 0.5))) if ratios[2] > 0 else 0
        while n_valid + n_test >= n:
            if n_valid >= n_test and n_valid > 0:
                n_valid -= 1
            else:
                n_test -= 1
        perm = rng.permutation(n)
        for j in perm[:n_valid]:
            assign[idx[j]] = 1
        for j in perm[n_valid : n_valid + n_test]:
            assign[idx[j]] = 2
    out = ([], [], [])
    for k, r in enumerate(records):
        out[assign[k]].append(r)
    return out


def build_dataset(
    social: SocialGraph,
    records: Sequence[GroupBuyRecord],
    item_count: int,
    ratios=(0.8, 0.1, 0.1),
    seed=0,
    user_ids: Sequence[str] = (),
    item_ids: Sequence[str] = (),
    meta: dict | None = None,
) -> Dataset:
    """Filter records to friends, split per initiator and assemble a :class:`Dataset`.

    Evaluation records whose initiator has fewer than two friends are moved to train.
    """
    raw = tuple(records)
    filtered = filter_friend_participants(raw, social)
    train, valid, test = split_dataset(filtered, ratios, seed)
    deg = social.degrees
    moved = [r for r in valid + test if deg[r.initiator] < 2]
    if moved:
        logger.info("moved %d evaluation records with fewer than two candidate friends to train", len(moved))
        keep = set(map(id, moved))
        order = {id(r): k for k, r in enumerate(filtered)}
        train = sorted(train + moved, key=lambda r: order[id(r)])
        valid = [r for r in valid if id(r) not in keep]
        test = [r for r in test if id(r) not in keep]
    info = dict(meta or {})
    info.update({"dropped_by_friend_filter": len(raw) - len(filtered)})
    return Dataset(
        social.user_count,
        int(item_count),
        social,
        tuple(train),
        tuple(valid),
        tuple(test),
        tuple(user_ids),
        tuple(item_ids),
        raw,
        info,
    )


# ---------------------------------------------------------------------------
# statistics

RATIO_BINS = tuple(f"{k / 10:.1f}-{(k + 1) / 10:.1f}" for k in range(10)) + ("1.0",)


def _ratio_bin(x: float) -> str:
    if x >= 1.0:
        return "1.0"
    return RATIO_BINS[min(int(np.floor(x * 10 + 1e-12)), 9)]


@dataclass
class StatsReport:
    source: str
    users: int
    items: int
    social_edges: int
    records: int
    group_size_histogram: dict[int, int]
    social_ratio_histogram: dict[str, int]
    role_ratio_histogram: dict[str, int]

    @property
    def group_size_mode(self) -> int:
        return max(sorted(self.group_size_histogram), key=lambda s: self.group_size_histogram[s])

    def social_ratio_mass_at_least(self, threshold: float) -> float:
        total = sum(self.social_ratio_histogram.values())
        if not total:
            return 0.0
        hit = 0
        for label, count in self.social_ratio_histogram.items():
            lo = 1.0 if label == "1.0" else float(label.split("-")[0])
            if lo >= threshold - 1e-12:
                hit += count
        return hit / total

    def to_text(self) -> str:
        lines = [
            "# group-buy dataset statistics",
            f"source\t{self.source}",
            f"users\t{self.users}",
            f"items\t{self.items}",
            f"social_edges\t{self.social_edges}",
            f"records\t{self.records}",
            f"group_size_mode\t{self.group_size_mode}",
            f"social_ratio_mass_ge_0.5\t{self.social_ratio_mass_at_least(0.5)!r}",
            "[group_size]",
        ]
        lines += [f"{k}\t{v}" for k, v in sorted(self.group_size_histogram.items())]
        lines.append("[social_ratio]")
        lines += [f"{k}\t{self.social_ratio_histogram[k]}" for k in RATIO_BINS]
        lines.append("[role_ratio]")
        lines += [f"{k}\t{self.role_ratio_histogram[k]}" for k in RATIO_BINS]
        return "\n".join(lines) + "\n"


def compute_stats(dataset: Dataset) -> StatsReport:
    """Group-size, social-ratio and role-ratio distributions.

    Uses the pre-filter records when the dataset carries them, otherwise the
    union of the splits; ``source`` says which.
    """
    records = dataset.raw_records if dataset.raw_records is not None else dataset.records
    source = "pre-filter" if dataset.raw_records is not None else "post-filter"
    if not records:
        raise ValueError("dataset has no group-buy records")
    sets = dataset.social.friend_sets
    sizes: dict[int, int] = defaultdict(int)
    social = dict.fromkeys(RATIO_BINS, 0)
    roles = dict.fromkeys(RATIO_BINS, 0)
    init_count: dict[int, int] = defaultdict(int)
    part_count: dict[int, int] = defaultdict(int)
    for r in records:
        sizes[r.group_size] += 1
        circle = sets[r.initiator]
        ratio = sum(p in circle for p in r.participants) / len(r.participants)
        social[_ratio_bin(ratio)] += 1
        init_count[r.initiator] += 1
        for p in r.participants:
            part_count[p] += 1
    for u in set(init_count) | set(part_count):
        a, b = init_count.get(u, 0), part_count.get(u, 0)
        roles[_ratio_bin(a / (a + b))] += 1
    return StatsReport(
        source,
        dataset.user_count,
        dataset.item_count,
        dataset.social.edge_count,
        len(records),
        dict(sorted(sizes.items())),
        social,
        roles,
    )
