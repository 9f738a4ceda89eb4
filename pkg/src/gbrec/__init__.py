"""Participant recommendation for group buying with multi-view graph convolution."""

__version__ = "0.1.0"

from gbrec.graph import (
    BipartiteGraph,
    GroupBuyRecord,
    NormalizedAdjacency,
    SocialGraph,
    build_normalized_adjacency,
    partition_views,
)
from gbrec.ingest import Dataset, build_dataset, compute_stats, load_group_buy_dataset
from gbrec.training import TrainConfig, train
from gbrec.estimators import MVPRec, UserActivity, CosineSimilarity, MFBPR
from gbrec.evaluation import MetricReport, evaluate, run_ablation

__all__ = [
    "BipartiteGraph",
    "CosineSimilarity",
    "Dataset",
    "GroupBuyRecord",
    "MFBPR",
    "MVPRec",
    "MetricReport",
    "NormalizedAdjacency",
    "SocialGraph",
    "TrainConfig",
    "UserActivity",
    "build_dataset",
    "build_normalized_adjacency",
    "compute_stats",
    "evaluate",
    "load_group_buy_dataset",
    "partition_views",
    "run_ablation",
    "train",
]
