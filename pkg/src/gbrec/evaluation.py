"""Evaluation protocol: rank every friend of the initiator, report Recall@k / NDCG@k."""

from __future__ import annotations

import ast
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from gbrec.estimators import MVPRec, ParticipantRanker
from gbrec.graph import GroupBuyRecord
from gbrec.ingest import Dataset
from gbrec.metrics import KS, RankedList, mean_metrics, ndcg_at_k, recall_at_k
from gbrec.training import TrainConfig

__all__ = [
    "MetricReport",
    "VARIANTS",
    "comparison_table",
    "evaluate",
    "ndcg_at_k",
    "rank_friends",
    "recall_at_k",
    "run_ablation",
    "variant_config",
]

#: which single configuration flag each ablation variant changes
VARIANTS = {
    "A": ("unify_roles", True),
    "B": ("consistency_weight", 0.0),
    "C": ("multi_head", False),
    "D": ("use_query", False),
}


def rank_friends(system: ParticipantRanker, record: GroupBuyRecord, record_id: int = 0, candidates=None) -> RankedList | None:
    """Ranked friends for one record, or ``None`` when the initiator has no friends."""
    if candidates is None and system.social_.degree(record.initiator) == 0:
        return None
    return system.rank(record, record_id, candidates)


@dataclass
class MetricReport:
    system: str
    split: str
    metrics: dict[str, float]
    n_records: int
    n_skipped: int = 0
    config: dict = field(default_factory=dict)

    def recall(self, k: int) -> float:
        return self.metrics[f"recall@{k}"]

    def ndcg(self, k: int) -> float:
        return self.metrics[f"ndcg@{k}"]

    def to_text(self) -> str:
        lines = [
            "# participant recommendation metrics",
            f"system\t{self.system}",
            f"split\t{self.split}",
            f"records\t{self.n_records}",
            f"skipped\t{self.n_skipped}",
        ]
        lines += [f"{k}\t{v!r}" for k, v in self.metrics.items()]
        lines += [f"config.{k}\t{v!r}" for k, v in sorted(self.config.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        head, metrics, config = {}, {}, {}
        for line in text.splitlines():
            if not line or line.startswith("#"):
                continue
            key, value = line.split("\t", 1)
            if key.startswith("config."):
                config[key[7:]] = ast.literal_eval(value)
            elif "@" in key:
                metrics[key] = float(value)
            else:
                head[key] = value
        return cls(head["system"], head["split"], metrics, int(head["records"]), int(head["skipped"]), config)


def evaluate(system: ParticipantRanker, dataset: Dataset, split: str = "test", ks=KS, config: Mapping | None = None) -> MetricReport:
    """Unweighted mean over evaluable records of the split."""
    records = dataset.split(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    ranked, skipped = system.rank_records(records)
    return MetricReport(
        system.system_name,
        split,
        mean_metrics(ranked, ks),
        len(ranked),
        skipped,
        dict(config if config is not None else system.get_params()),
    )


def variant_config(config: TrainConfig, variant: str) -> TrainConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}; expected one of {sorted(VARIANTS)}")
    key, value = VARIANTS[variant]
    return config.replace(**{key: value})


def run_ablation(dataset: Dataset, config: TrainConfig, variant: str, split: str = "test") -> MetricReport:
    cfg = variant_config(config, variant)
    est = MVPRec(**cfg.to_dict()).fit(dataset)
    report = evaluate(est, dataset, split)
    report.system = f"mvprec-variant-{variant}"
    return report


def comparison_table(reports: Sequence[MetricReport], metrics: Sequence[str] | None = None) -> str:
    """Systems-by-metrics grid (metrics as rows), tab separated."""
    if not reports:
        raise ValueError("no reports to compare")
    splits = {r.split for r in reports}
    counts = {r.n_records for r in reports}
    if len(splits) > 1 or len(counts) > 1:
        raise ValueError("reports cover different record sets")
    metrics = list(metrics or (f"{m}@{k}" for m in ("ndcg", "recall") for k in KS))
    lines = ["metric\t" + "\t".join(r.system for r in reports)]
    for m in metrics:
        lines.append(m + "\t" + "\t".join(f"{r.metrics[m]:.4f}" for r in reports))
    return "\n".join(lines) + "\n"
