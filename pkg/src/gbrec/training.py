"""Mini-batch training with validation early stopping, plus grid search."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

import numpy as np
from sklearn.model_selection import ParameterGrid

from gbrec import container
from gbrec.autodiff import AdamState, ParamStore, adam_step
from gbrec.graph import GroupBuyRecord, SocialGraph
from gbrec.ingest import Dataset
from gbrec.metrics import RankedList, mean_metrics
from gbrec.model import Batch, ModelSpec, MultiViewModel, check_params, init_params, make_batch

logger = logging.getLogger(__name__)

INIT_STREAM = 1
SHUFFLE_STREAM = 2

#: hyperparameter grid searched for every model
LR_GRID = (1e-1, 5e-2, 1e-2, 5e-3, 1e-3, 5e-4, 1e-4)
WEIGHT_DECAY_GRID = (1e-3, 1e-4, 1e-5, 1e-6)
LAYER_GRID = (1, 2, 3, 4, 5)
HEAD_GRID = (1, 2, 3, 4, 5)
CONSISTENCY_GRID = (0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass(frozen=True)
class TrainConfig:
    embedding_dim: int = 32
    n_layers: int = 3
    n_heads: int = 2
    lr: float = 5e-3
    weight_decay: float = 1e-5
    consistency_weight: float = 0.2
    batch_size: int = 512
    max_epochs: int = 300
    patience: int = 10
    seed: int = 0
    init_std: float = 0.01
    unify_roles: bool = False
    multi_head: bool = True
    use_query: bool = True
    shared_embeddings: bool = True
    frozen_encoding: bool = False

    def __post_init__(self):
        for name in ("embedding_dim", "n_heads", "batch_size", "max_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("n_layers", "patience", "seed"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.lr > 0 or not self.init_std > 0:
            raise ValueError("lr and init_std must be > 0")
        if self.weight_decay < 0 or self.consistency_weight < 0:
            raise ValueError("weight_decay and consistency_weight must be >= 0")

    def model_spec(self, n_users: int, n_items: int) -> ModelSpec:
        return ModelSpec(
            n_users,
            n_items,
            self.embedding_dim,
            self.n_layers,
            self.n_heads,
            self.unify_roles,
            self.multi_head,
            self.use_query,
            self.shared_embeddings,
        )

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.to_dict().items())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v)


def _coerce(name: str, typ, raw: str):
    raw = raw.strip()
    if typ in (bool, "bool"):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    raise TypeError(f"unsupported config field type {typ!r}")


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def config_from_mapping(values: Mapping[str, Any], base: TrainConfig | None = None) -> TrainConfig:
    unknown = sorted(set(values) - set(_FIELD_TYPES))
    if unknown:
        raise KeyError(f"unknown config keys: {', '.join(unknown)}")
    conv = {k: _coerce(k, _FIELD_TYPES[k], v) if isinstance(v, str) else v for k, v in values.items()}
    return (base or TrainConfig()).replace(**conv)


def _kv_lines(text: str) -> Iterator[tuple[int, str, str]]:
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        yield lineno, key.strip(), value.strip()


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Flat ``key=value`` text; unknown keys are errors."""
    values = {}
    for lineno, key, value in _kv_lines(text):
        if key in values:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return config_from_mapping(values, base)


def parse_grid(text: str) -> dict[str, list]:
    """``key=v1,v2,...`` lines into a parameter grid."""
    grid = {}
    for lineno, key, value in _kv_lines(text):
        if key not in _FIELD_TYPES:
            raise KeyError(f"line {lineno}: unknown grid key {key!r}")
        grid[key] = [_coerce(key, _FIELD_TYPES[key], v) for v in value.split(",") if v.strip()]
        if not grid[key]:
            raise ValueError(f"line {lineno}: empty value list for {key!r}")
    if not grid:
        raise ValueError("grid is empty")
    return grid


# ---------------------------------------------------------------------------
# batching


def usable_records(records: Sequence[GroupBuyRecord], social: SocialGraph) -> tuple[list[int], int]:
    """Indices of records whose initiator has at least one friend, and the skip count."""
    deg = social.degrees
    keep = [k for k, r in enumerate(records) if deg[r.initiator] > 0]
    return keep, len(records) - len(keep)


def make_batches(
    records: Sequence[GroupBuyRecord],
    social: SocialGraph,
    batch_size: int,
    seed: int = 0,
    epoch: int = 0,
    shuffle: bool = True,
) -> Iterator[Batch]:
    """Deterministic shuffled batches; ``record_ids`` index into ``records``."""
    keep, skipped = usable_records(records, social)
    if skipped:
        logger.warning("skipping %d records whose initiator has no friends", skipped)
    order = np.asarray(keep, dtype=np.int64)
    if shuffle:
        order = order[np.random.default_rng([int(seed), SHUFFLE_STREAM, int(epoch)]).permutation(len(order))]
    for start in range(0, len(order), batch_size):
        ids = order[start : start + batch_size]
        yield make_batch([records[k] for k in ids], social, record_ids=ids)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: TrainConfig
    n_users: int
    n_items: int
    epoch: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def spec(self) -> ModelSpec:
        return self.config.model_spec(self.n_users, self.n_items)

    def store(self) -> ParamStore:
        store = ParamStore(self.params)
        check_params(store, self.spec)
        return store

    def to_bytes(self) -> bytes:
        meta = {
            "config": self.config.to_dict(),
            "n_users": self.n_users,
            "n_items": self.n_items,
            "epoch": self.epoch,
            "embedding_dim": self.config.embedding_dim,
            "n_layers": self.config.n_layers,
            "n_heads": self.config.n_heads,
            "info": self.meta,
        }
        return container.dumps("checkpoint", dict(sorted(self.params.items())), meta)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        tensors, meta = container.loads(data, kind="checkpoint")
        config = config_from_mapping(meta["config"])
        return cls(tensors, config, meta["n_users"], meta["n_items"], meta["epoch"], meta.get("info", {}))

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# training


def rank_records(
    model: MultiViewModel,
    store: ParamStore,
    records: Sequence[GroupBuyRecord],
    social: SocialGraph,
    batch_size: int = 1024,
) -> tuple[list[RankedList], int]:
    """Rank every usable record's friends; returns the lists and the skip count."""
    keep, skipped = usable_records(records, social)
    enc = model.encode(store)
    out = []
    for start in range(0, len(keep), batch_size):
        ids = keep[start : start + batch_size]
        batch = make_batch([records[k] for k in ids], social, record_ids=ids, with_truth=False)
        P = model.predict_proba(store, batch, enc)
        for b, k in enumerate(ids):
            m = batch.mask[b]
            out.append(RankedList.from_scores(k, batch.candidates[b, m], P[b, m], records[k].participants))
    return out, skipped


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    best_epoch: int
    best_valid: float | None

    def history_lines(self) -> str:
        return "".join(json.dumps(h, sort_keys=True) + "\n" for h in self.history)


def train(dataset: Dataset, config: TrainConfig, stop_metric: str = "ndcg@3", monitor: str = "valid") -> TrainResult:
    """Train on ``dataset.train``; early-stop on ``stop_metric`` of the ``monitor`` split.

    Stops once ``patience`` consecutive epochs fail to improve the best
    monitored score, and returns the best checkpoint. Without monitored
    records every epoch runs and the last parameters are kept.
    """
    spec = config.model_spec(dataset.user_count, dataset.item_count)
    model = MultiViewModel(spec, dataset.train, dataset.social)
    store = init_params(spec, np.random.default_rng([config.seed, INIT_STREAM]), config.init_std)
    state = AdamState()
    lam1, lam2 = config.consistency_weight, config.weight_decay

    history: list[dict] = []
    best_score, best_epoch, best_params = None, -1, None
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        totals = {"loss_part": 0.0, "loss_consistency": 0.0, "loss_l2": 0.0, "loss_total": 0.0}
        n_batches = 0
        frozen = model.encode(store) if config.frozen_encoding else None
        for bid, batch in enumerate(make_batches(dataset.train, dataset.social, config.batch_size, config.seed, epoch)):
            try:
                parts, grads = model.loss_and_grad(store, batch, lam1, lam2, enc=frozen, include_l2_grad=False)
                store.accumulate(grads)
                adam_step(store, state, config.lr, lam2)
            except FloatingPointError as exc:
                raise FloatingPointError(f"epoch {epoch} batch {bid}: {exc}") from exc
            totals["loss_part"] += parts.part
            totals["loss_consistency"] += parts.consistency
            totals["loss_l2"] += parts.l2
            totals["loss_total"] += parts.total
            n_batches += 1
        if n_batches:
            totals["loss_consistency"] /= n_batches
        entry = {"epoch": epoch, **totals, monitor: None}
        watched = dataset.split(monitor)
        if watched:
            ranked, _ = rank_records(model, store, watched, dataset.social)
            metrics = mean_metrics(ranked)
            entry[monitor] = metrics
            score = metrics[stop_metric]
            if best_score is None or score > best_score:
                best_score, best_epoch, best_params = score, epoch, store.state_dict()
                since_best = 0
            else:
                since_best += 1
        history.append(entry)
        logger.info("epoch %d loss %.4f %s %s", epoch, totals["loss_total"], monitor, entry[monitor])
        if watched and since_best > config.patience:
            break
    if best_params is None:
        best_params, best_epoch = store.state_dict(), len(history)
    ck = Checkpoint(best_params, config, dataset.user_count, dataset.item_count, best_epoch)
    return TrainResult(ck, history, best_epoch, best_score)


@dataclass
class GridResult:
    rows: list[tuple[TrainConfig, float]]
    best_config: TrainConfig
    best_score: float
    keys: tuple[str, ...]
    best_result: TrainResult | None = None

    def to_tsv(self) -> str:
        lines = ["\t".join(self.keys + ("valid_ndcg@3",))]
        for cfg, score in self.rows:
            d = cfg.to_dict()
            lines.append("\t".join([_fmt(d[k]) for k in self.keys] + [repr(score)]))
        return "\n".join(lines) + "\n"


def _better(score: float, best: float) -> bool:
    """NaN scores never win over a real one."""
    if math.isnan(score):
        return False
    return math.isnan(best) or score > best


def grid_search(dataset: Dataset, grid: Mapping[str, Sequence], base: TrainConfig | None = None, fit=None) -> GridResult:
    """Exhaustive search; picks the best validation NDCG@3 (first wins ties, NaN never wins).

    ``fit(dataset, config)`` must return an object with ``best_valid``; it
    defaults to :func:`train`.
    """
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("grid must be non-empty")
    base = base or TrainConfig()
    fit = fit or train
    keys = tuple(sorted(grid))
    rows = []
    best = None
    for point in ParameterGrid({k: list(v) for k, v in grid.items()}):
        cfg = config_from_mapping(point, base)
        result = fit(dataset, cfg)
        score = result.best_valid if result.best_valid is not None else float("nan")
        rows.append((cfg, score))
        logger.info("grid %s -> %s", point, score)
        if best is None or _better(score, best[1]):
            best = (cfg, score, result)
    return GridResult(rows, best[0], best[1], keys, best[2] if isinstance(best[2], TrainResult) else None)
