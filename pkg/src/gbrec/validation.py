"""Input checks shared by estimators and the command line."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from gbrec.graph import GroupBuyRecord
from gbrec.ingest import Dataset


def check_dataset(dataset) -> Dataset:
    if not isinstance(dataset, Dataset):
        raise TypeError(f"expected a gbrec Dataset, got {type(dataset).__name__}")
    if not dataset.train:
        raise ValueError("dataset has no training records")
    n_users, n_items = dataset.user_count, dataset.item_count
    for split in ("train", "valid", "test"):
        for k, r in enumerate(dataset.split(split)):
            if not 0 <= r.item < n_items:
                raise ValueError(f"{split} record {k}: item {r.item} out of range")
            ids = (r.initiator, *r.participants)
            if min(ids) < 0 or max(ids) >= n_users:
                raise ValueError(f"{split} record {k}: user id out of range")
    return dataset


def check_records(records) -> list[GroupBuyRecord]:
    records = list(records)
    for k, r in enumerate(records):
        if not isinstance(r, GroupBuyRecord):
            raise TypeError(f"record {k} is {type(r).__name__}, expected GroupBuyRecord")
    return records


def check_candidates(candidates: Sequence[int], user_count: int) -> np.ndarray:
    cand = np.asarray(candidates, dtype=np.int64).reshape(-1)
    if cand.size == 0:
        raise ValueError("candidate set is empty")
    if cand.min() < 0 or cand.max() >= user_count:
        raise ValueError(f"candidate ids must lie in [0, {user_count})")
    if len(np.unique(cand)) != len(cand):
        raise ValueError("candidate ids must be distinct")
    return cand
