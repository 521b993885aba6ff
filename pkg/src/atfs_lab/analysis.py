"""Feature-space diagnostics: class similarity, boundary thickness, 2-D export."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import attacks
from .files import read_csv, write_csv
from .fs_loss import FeatureBatch, normalize_features

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------- similarity

@dataclass
class SimilarityMatrix:
    values: np.ndarray  # [C, C], NaN where undefined
    counts: np.ndarray  # number of pairs behind each entry
    undefined: list = field(default_factory=list)  # (i, j) entries with no pairs

    def diagonal_mean(self) -> float:
        return float(np.nanmean(np.diag(self.values)))

    def off_diagonal_mean(self) -> float:
        c = self.values.shape[0]
        off = self.values[~np.eye(c, dtype=bool)]
        return float(np.nanmean(off))


def class_similarity_matrix(features, labels, num_classes: int | None = None) -> SimilarityMatrix:
    """Mean cosine similarity of unit features between every pair of classes.

    Diagonal entries average over distinct same-class pairs (self pairs are
    excluded), so a class with a single sample has an undefined diagonal.
    """
    if not isinstance(features, FeatureBatch):
        features = normalize_features(torch.as_tensor(features))
    h = features.unit.detach().double().cpu().numpy()
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(h):
        raise ValueError(f"{len(labels)} labels for {len(h)} feature rows")
    c = int(num_classes if num_classes is not None else labels.max() + 1)
    onehot = np.eye(c)[labels]
    sums = onehot.T @ h  # per-class feature sums
    n = onehot.sum(axis=0)
    pair_sums = sums @ sums.T
    sq = onehot.T @ np.einsum("ij,ij->i", h, h)
    pair_sums[np.diag_indices(c)] -= sq
    counts = np.outer(n, n)
    counts[np.diag_indices(c)] = n * (n - 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(counts > 0, pair_sums / np.maximum(counts, 1), np.nan)
    values = np.clip(values, -1.0, 1.0)
    values = (values + values.T) / 2
    undefined = [(int(i), int(j)) for i, j in zip(*np.nonzero(counts == 0))]
    if undefined:
        logger.warning("similarity undefined for class pairs %s", undefined[:10])
    return SimilarityMatrix(values=values, counts=counts.astype(np.int64), undefined=undefined)


def extract_features(model, x, batch_size: int = 500) -> torch.Tensor:
    was_training = model.training
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(model.forward_with_features(x[i:i + batch_size])[1])
    model.train(was_training)
    return torch.cat(out)


def similarity_report(model, x, x_adv, y, num_classes: int) -> dict[str, SimilarityMatrix]:
    """Similarity matrices for clean and adversarial inputs separately."""
    return {
        "clean": class_similarity_matrix(extract_features(model, x), y.numpy(), num_classes),
        "adversarial": class_similarity_matrix(extract_features(model, x_adv), y.numpy(), num_classes),
    }


# ---------------------------------------------------------------- thickness

@dataclass(frozen=True)
class ThicknessConfig:
    alpha: float = 0.0
    beta: float = 0.75
    pairs: int = 320
    segment_points: int = 128
    pair_epsilon: float = 4.0  # L2 radius of the pairing attack
    pair_step: float = 0.4
    pair_steps: int = 20
    max_attempts: int | None = None  # candidates tried; None means the whole dataset
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.alpha < self.beta <= 1:
            raise ValueError(f"need 0 <= alpha < beta <= 1, got ({self.alpha}, {self.beta})")
        if self.pairs < 1 or self.segment_points < 1:
            raise ValueError("pairs and segment_points must be >= 1")


@dataclass
class ThicknessResult:
    value: float  # NaN when no pair was found
    pairs_used: int
    attempts: int
    per_pair: list
    config: dict

    @property
    def defined(self) -> bool:
        return self.pairs_used > 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["value"] = None if not self.defined else self.value
        d["defined"] = self.defined
        return d


def _posteriors(model, x):
    with torch.no_grad():
        return F.softmax(model(x), dim=1)


def segment_thickness(model, x1: torch.Tensor, x2: torch.Tensor, cfg: ThicknessConfig,
                      c1: torch.Tensor | None = None, c2: torch.Tensor | None = None) -> torch.Tensor:
    """Per-pair ``||x1 - x2|| * frac{t : alpha < p_c1(x(t)) - p_c2(x(t)) < beta}``.

    ``x(t)`` runs over ``segment_points`` evenly spaced points of the closed
    segment from ``x1`` to ``x2``.  Endpoint classes default to the model's
    predictions at each end.
    """
    if c1 is None:
        c1 = _posteriors(model, x1).argmax(1)
    if c2 is None:
        c2 = _posteriors(model, x2).argmax(1)
    ts = torch.linspace(0, 1, cfg.segment_points, dtype=x1.dtype)
    inside = torch.zeros(len(x1), dtype=torch.float64)
    for t in ts:
        p = _posteriors(model, x1 + t * (x2 - x1))
        gap = p.gather(1, c1[:, None]).squeeze(1) - p.gather(1, c2[:, None]).squeeze(1)
        inside += ((gap > cfg.alpha) & (gap < cfg.beta)).double()
    length = (x2 - x1).flatten(1).double().norm(dim=1)
    return length * inside / cfg.segment_points


def _content_order(x: torch.Tensor) -> np.ndarray:
    # order by content so the sampled pairs do not depend on dataset order
    keys = [hashlib.sha256(row.numpy().tobytes()).hexdigest() for row in x.detach().cpu()]
    return np.argsort(np.array(keys), kind="stable")


def boundary_thickness(model, x: torch.Tensor, cfg: ThicknessConfig | None = None) -> ThicknessResult:
    """Mean thickness over clean points paired with L2-PGD points of another predicted class."""
    cfg = cfg or ThicknessConfig()
    if len(x) == 0:
        raise ValueError("empty dataset")
    was_training = model.training
    model.eval()
    order = _content_order(x)
    order = order[np.random.default_rng(cfg.seed).permutation(len(order))]
    limit = len(order) if cfg.max_attempts is None else min(cfg.max_attempts, len(order))

    per_pair: list[float] = []
    attempts = 0
    for start in range(0, limit, cfg.batch_size):
        if len(per_pair) >= cfg.pairs:
            break
        idx = torch.as_tensor(order[start:min(start + cfg.batch_size, limit)])
        x1 = x[idx]
        c1 = _posteriors(model, x1).argmax(1)
        x2 = attacks.pgd_l2(model, x1, c1, cfg.pair_epsilon, cfg.pair_step, cfg.pair_steps)
        c2 = _posteriors(model, x2).argmax(1)
        flipped = c2 != c1
        need = cfg.pairs - len(per_pair)
        # count attempts up to and including the last pair taken
        hits = flipped.nonzero().flatten()[:need]
        attempts += int(hits[-1]) + 1 if len(hits) == need else len(idx)
        if len(hits):
            per_pair += segment_thickness(model, x1[hits], x2[hits], cfg, c1[hits], c2[hits]).tolist()
    model.train(was_training)

    value = float(np.mean(per_pair)) if per_pair else math.nan
    if not per_pair:
        logger.warning("boundary thickness undefined: no class-changing pair in %d attempts "
                       "(L2 radius %.3g)", attempts, cfg.pair_epsilon)
    return ThicknessResult(value=value, pairs_used=len(per_pair), attempts=attempts,
                           per_pair=per_pair, config=asdict(cfg))


# ---------------------------------------------------------------- 2-D export

def pca_2d(features) -> np.ndarray:
    """Project unit features onto their top two principal axes (zero-padded if rank < 2)."""
    if not isinstance(features, FeatureBatch):
        features = normalize_features(torch.as_tensor(features))
    h = features.unit.detach().double().cpu().numpy()
    if len(h) < 2:
        raise ValueError("need at least two samples for PCA")
    centered = h - h.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    k = min(2, vt.shape[0])
    axes = vt[:k]
    # deterministic orientation: largest-magnitude loading positive
    signs = np.sign(axes[np.arange(k), np.abs(axes).argmax(axis=1)])
    axes = axes * np.where(signs == 0, 1.0, signs)[:, None]
    coords = centered @ axes.T
    tol = max(h.shape) * np.finfo(float).eps * (s[0] if len(s) else 0.0)
    for j in range(k):
        if s[j] <= tol:
            coords[:, j] = 0.0
    if k < 2:
        coords = np.hstack([coords, np.zeros((len(h), 2 - k))])
    return coords


FEATURE_2D_COLUMNS = ("node_id", "x", "y", "label", "kind")


def export_features_2d(features, labels: Sequence[int], kinds: Sequence[str] | None = None,
                       path: str | Path | None = None, method: str = "pca") -> list[dict]:
    if method != "pca":
        raise ValueError(f"unsupported embedding method {method!r}")
    coords = pca_2d(features)
    labels = np.asarray(labels)
    kinds = list(kinds) if kinds is not None else ["clean"] * len(labels)
    if not len(labels) == len(kinds) == len(coords):
        raise ValueError("features, labels and kinds must have one entry per node")
    rows = [{"node_id": i, "x": float(coords[i, 0]), "y": float(coords[i, 1]),
             "label": int(labels[i]), "kind": kinds[i]} for i in range(len(coords))]
    if path is not None:
        write_csv(path, FEATURE_2D_COLUMNS, rows)
    return rows


def write_matrix_csv(path, matrix: np.ndarray) -> None:
    c = matrix.shape[0]
    rows = [{"class": i, **{str(j): float(matrix[i, j]) for j in range(c)}} for i in range(c)]
    write_csv(path, ["class"] + [str(j) for j in range(c)], rows)


def read_matrix_csv(path) -> np.ndarray:
    rows = read_csv(path)
    c = len(rows)
    return np.array([[float(r[str(j)]) for j in range(c)] for r in rows])
