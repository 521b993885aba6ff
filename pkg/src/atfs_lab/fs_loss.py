"""Feature separability loss over a minibatch subgraph.

For a node ``i`` with unit feature ``h_i`` every incident link ``(i, j)`` gets
the softmax probability ``exp(h_i.h_j) / S_i`` where ``S_i`` sums over all
incident links, positive and negative alike.  The per-node value is the
weighted log-likelihood of the positive links::

    (eta1 * sum_ca log p + eta2 * sum_intra log p) / |E+(i)|

and the batch value is the mean over nodes.  Larger is better; the training
objective subtracts it.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .atg import BatchSubgraph, LinkWeights

NORM_EPS = 1e-12


@dataclass
class FeatureBatch:
    raw: torch.Tensor
    unit: torch.Tensor

    def __len__(self):
        return self.raw.shape[0]


@dataclass
class FsLossValue:
    total: torch.Tensor
    per_node: torch.Tensor
    probabilities: torch.Tensor  # [N, N], zero off the incident links (i.e. on the diagonal)


def normalize_features(raw: torch.Tensor) -> FeatureBatch:
    raw = torch.as_tensor(raw)
    if raw.ndim != 2 or raw.shape[0] < 1 or raw.shape[1] < 1:
        raise ValueError(f"expected a nonempty [nodes, dim] matrix, got shape {tuple(raw.shape)}")
    if not torch.isfinite(raw).all():
        raise ValueError("features contain non-finite entries")
    norm = raw.norm(dim=1, keepdim=True).clamp_min(NORM_EPS)
    return FeatureBatch(raw=raw, unit=raw / norm)


def interleave(clean: torch.Tensor, adv: torch.Tensor) -> torch.Tensor:
    """Stack clean/adversarial rows into subgraph node order [c0, a0, c1, a1, ...]."""
    return torch.stack([clean, adv], dim=1).reshape(-1, clean.shape[-1])


def _log_link_probabilities(unit: torch.Tensor, temperature: float) -> torch.Tensor:
    n = unit.shape[0]
    sim = unit @ unit.T
    if temperature != 1.0:
        sim = sim / temperature
    self_mask = torch.eye(n, dtype=torch.bool, device=unit.device)
    sim = sim.masked_fill(self_mask, float("-inf"))
    log_p = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    # -inf on the diagonal would poison 0 * log_p sums
    return log_p.masked_fill(self_mask, 0.0)


def link_probabilities(features: FeatureBatch, sub: BatchSubgraph, node: int,
                       temperature: float = 1.0) -> dict[int, float]:
    """Probability of each link incident to local node ``node``, keyed by neighbour."""
    if not 0 <= node < sub.num_nodes:
        raise IndexError(f"local node {node} not in subgraph of {sub.num_nodes} nodes")
    if sub.num_nodes < 2:
        raise ValueError("isolated node: no incident links")
    _check_aligned(features, sub)
    log_p = _log_link_probabilities(features.unit, temperature)[node]
    return {j: float(log_p[j].exp()) for j in range(sub.num_nodes) if j != node}


def _check_aligned(features: FeatureBatch, sub: BatchSubgraph) -> None:
    if len(features) != sub.num_nodes:
        raise ValueError(f"{len(features)} feature rows for {sub.num_nodes} subgraph nodes")


def fs_loss_batch(features: FeatureBatch, sub: BatchSubgraph, weights: LinkWeights | None = None,
                  temperature: float = 1.0) -> FsLossValue:
    _check_aligned(features, sub)
    weights = weights or LinkWeights(sub.ca.weight, sub.intra.weight, sub.neg.weight)
    unit = features.unit
    n = unit.shape[0]
    if n < 2:
        raise ValueError("isolated node: no incident links")
    masks = sub.masks()
    ca = torch.as_tensor(masks["ca"], device=unit.device)
    intra = torch.as_tensor(masks["intra"], device=unit.device)

    log_p = _log_link_probabilities(unit, temperature)
    zero = log_p.new_zeros(())
    ca_term = torch.where(ca, log_p, zero).sum(dim=1)
    intra_term = torch.where(intra, log_p, zero).sum(dim=1)
    degree = torch.as_tensor(sub.positive_degree, dtype=unit.dtype, device=unit.device)
    per_node = (weights.eta1 * ca_term + weights.eta2 * intra_term) / degree

    probs = log_p.exp().masked_fill(torch.eye(n, dtype=torch.bool, device=unit.device), 0.0)
    return FsLossValue(total=per_node.mean(), per_node=per_node, probabilities=probs)


def fs_loss_from_features(clean: torch.Tensor, adv: torch.Tensor, sub: BatchSubgraph,
                          weights: LinkWeights | None = None, temperature: float = 1.0) -> FsLossValue:
    """Convenience wrapper: raw clean/adversarial features in batch order."""
    return fs_loss_batch(normalize_features(interleave(clean, adv)), sub, weights, temperature)


def expanded_objective(features: FeatureBatch, sub: BatchSubgraph, temperature: float = 1.0) -> torch.Tensor:
    """Per-node (sum of positive-link exps - sum of negative-link exps) / S.

    Diagnostic only.  Since the probabilities over all incident links sum to
    one this equals ``2 * P(positive) - 1``; raising the positive mass lowers
    the negative mass by the same amount.
    """
    _check_aligned(features, sub)
    masks = sub.masks()
    log_p = _log_link_probabilities(features.unit, temperature)
    p = log_p.exp()
    pos = torch.as_tensor(masks["ca"] | masks["intra"], device=p.device)
    neg = torch.as_tensor(masks["neg"], device=p.device)
    zero = p.new_zeros(())
    return torch.where(pos, p, zero).sum(dim=1) - torch.where(neg, p, zero).sum(dim=1)
