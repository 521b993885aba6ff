"""Adversarial training with a feature-separability regulariser over a signed sample graph."""

from .atg import Atg, BatchSubgraph, LinkWeights, build_atg, subgraph_for_batch
from .attacks import AttackConfig, cw_pgd, fgsm, pgd
from .fs_loss import FeatureBatch, FsLossValue, fs_loss_batch, link_probabilities, normalize_features
from .training import TrainConfig, lr_at, total_objective, train

__version__ = "0.1.0"

__all__ = [
    "Atg", "BatchSubgraph", "LinkWeights", "build_atg", "subgraph_for_batch",
    "AttackConfig", "cw_pgd", "fgsm", "pgd",
    "FeatureBatch", "FsLossValue", "fs_loss_batch", "link_probabilities", "normalize_features",
    "TrainConfig", "lr_at", "total_objective", "train",
]
