"""Adversarial training graph over clean samples and their adversarial twins.

Node ``2*i`` is clean sample ``i`` and node ``2*i + 1`` is its adversarial
counterpart; both carry ``labels[i]``.  Every unordered pair of nodes is one
of three kinds:

* ``ca``    - a clean node and its own adversarial counterpart (weight eta1)
* ``intra`` - any other same-class pair (weight eta2)
* ``neg``   - a cross-class pair (weight eta3)

The full graph is never materialized; links are derived from the labels on
demand and only minibatch subgraphs are built explicitly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

CA, INTRA, NEG = "ca", "intra", "neg"
LINK_KINDS = (CA, INTRA, NEG)


@dataclass(frozen=True)
class LinkWeights:
    eta1: float = 1.0
    eta2: float = 1.0
    eta3: float = 1.0

    def __post_init__(self):
        for name in ("eta1", "eta2", "eta3"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"link weight {name} must be finite and >= 0, got {value!r}")

    def of(self, kind: str) -> float:
        return {CA: self.eta1, INTRA: self.eta2, NEG: self.eta3}[kind]


def clean_node(i: int) -> int:
    return 2 * i


def adv_node(i: int) -> int:
    return 2 * i + 1


def sample_of(node: int) -> int:
    return node // 2


def is_adversarial(node: int) -> bool:
    return node % 2 == 1


def counterpart(node: int) -> int:
    return node ^ 1


@dataclass(frozen=True)
class Atg:
    """Label-derived signed complete graph on ``2 * n`` nodes."""

    labels: np.ndarray
    weights: LinkWeights = field(default_factory=LinkWeights)

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def num_nodes(self) -> int:
        return 2 * self.n

    def label_of(self, node: int) -> int:
        return int(self.labels[sample_of(node)])

    def _check_node(self, node: int) -> None:
        if not 0 <= node < self.num_nodes:
            raise IndexError(f"node id {node} out of range [0, {self.num_nodes})")

    def link_kind(self, u: int, v: int) -> str:
        self._check_node(u)
        self._check_node(v)
        if u == v:
            raise ValueError("no self links in the graph")
        if counterpart(u) == v:
            return CA
        return INTRA if self.label_of(u) == self.label_of(v) else NEG

    def link_counts(self) -> dict[str, int]:
        """Sizes of the three link sets, from class histograms (no enumeration)."""
        counts = np.bincount(self.labels)
        same_pairs = int(sum(math.comb(2 * int(c), 2) for c in counts))
        total = math.comb(self.num_nodes, 2)
        return {CA: self.n, INTRA: same_pairs - self.n, NEG: total - same_pairs}

    def links_of_node(self, node: int) -> tuple[list[int], list[int], list[int]]:
        """Neighbours of ``node`` split into (ca, intra, negative) lists."""
        self._check_node(node)
        others = np.arange(self.num_nodes)
        others = others[others != node]
        same = self.labels[others // 2] == self.label_of(node)
        mate = counterpart(node)
        ca = [mate]
        intra = [int(v) for v in others[same] if v != mate]
        neg = [int(v) for v in others[~same]]
        return ca, intra, neg


def build_atg(labels: Sequence[int], weights: LinkWeights | None = None,
              num_classes: int | None = None) -> Atg:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise ValueError("labels must be a nonempty 1-D sequence")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be integer class ids")
    if labels.min() < 0:
        raise ValueError("labels must be nonnegative")
    if num_classes is not None and labels.max() >= num_classes:
        raise ValueError(f"label {labels.max()} >= num_classes={num_classes}")
    labels = labels.astype(np.int64).copy()
    labels.setflags(write=False)
    return Atg(labels=labels, weights=weights if weights is not None else LinkWeights())


@dataclass(frozen=True)
class LinkSet:
    pairs: np.ndarray  # [m, 2] local node positions, i < j
    weight: float

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class BatchSubgraph:
    """Induced subgraph on the clean and adversarial nodes of a minibatch.

    Local node order interleaves each sample's clean and adversarial node:
    ``nodes = [2*b0, 2*b0+1, 2*b1, 2*b1+1, ...]``.  Feature matrices fed to
    the loss must follow the same order.
    """

    nodes: np.ndarray
    labels: np.ndarray  # per local node
    ca: LinkSet
    intra: LinkSet
    neg: LinkSet
    positive_degree: np.ndarray  # per local node: |ca(i)| + |intra(i)|

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    def link_sets(self) -> dict[str, LinkSet]:
        return {CA: self.ca, INTRA: self.intra, NEG: self.neg}

    def masks(self) -> dict[str, np.ndarray]:
        """Dense symmetric boolean adjacency per link kind."""
        out = {}
        for kind, links in self.link_sets().items():
            m = np.zeros((self.num_nodes, self.num_nodes), dtype=bool)
            if len(links):
                m[links.pairs[:, 0], links.pairs[:, 1]] = True
                m[links.pairs[:, 1], links.pairs[:, 0]] = True
            out[kind] = m
        return out


def subgraph_for_batch(g: Atg, batch: Sequence[int]) -> BatchSubgraph:
    batch = np.asarray(batch, dtype=np.int64).reshape(-1)
    if batch.size == 0:
        raise ValueError("empty batch")
    if batch.min() < 0 or batch.max() >= g.n:
        raise IndexError(f"batch index out of range [0, {g.n})")
    if np.unique(batch).size != batch.size:
        raise ValueError("duplicate sample index in batch")

    nodes = np.stack([2 * batch, 2 * batch + 1], axis=1).reshape(-1)
    labels = g.labels[nodes // 2]
    m = len(nodes)
    iu, ju = np.triu_indices(m, k=1)
    is_ca = (nodes[iu] ^ 1) == nodes[ju]
    same = labels[iu] == labels[ju]
    is_intra = same & ~is_ca
    is_neg = ~same

    def pairs(sel):
        return np.stack([iu[sel], ju[sel]], axis=1)

    ca, intra, neg = pairs(is_ca), pairs(is_intra), pairs(is_neg)
    pos_deg = np.bincount(np.concatenate([ca.ravel(), intra.ravel()]), minlength=m)
    w = g.weights
    return BatchSubgraph(
        nodes=nodes,
        labels=labels,
        ca=LinkSet(ca, w.eta1),
        intra=LinkSet(intra, w.eta2),
        neg=LinkSet(neg, w.eta3),
        positive_degree=pos_deg,
    )
