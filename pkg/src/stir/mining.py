"""PK batches, batch-hard triplet mining, hard pair mining and the two losses."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

DEFAULT_MARGIN = 0.15


class SamplingError(ValueError):
    pass


class MiningError(ValueError):
    pass


@dataclass(frozen=True)
class PKBatch:
    indices: np.ndarray  # positions into the source dataset
    labels: np.ndarray
    num_labels: int
    instances_per_label: int

    def __post_init__(self):
        if len(self.indices) != self.num_labels * self.instances_per_label:
            raise SamplingError("batch size must equal P*K")
        _, counts = np.unique(self.labels, return_counts=True)
        if len(counts) != self.num_labels or np.any(counts != self.instances_per_label):
            raise SamplingError("each sampled label must appear exactly K times")


class Triplet(NamedTuple):
    anchor: int
    positive: int
    negative: int


class LabeledPair(NamedTuple):
    a: int
    b: int
    is_negative: int


@dataclass(frozen=True)
class PairMining:
    pairs: list[LabeledPair]
    insufficient: bool  # fewer pairs than requested of at least one kind


def pk_sample(labels: Sequence, num_labels: int, instances_per_label: int, rng: np.random.Generator) -> PKBatch:
    """Draw P labels without replacement and K instances of each.

    Classes with fewer than K items are oversampled with replacement.
    """
    labels = np.asarray(labels)
    by_label: dict = defaultdict(list)
    for i, lab in enumerate(labels.tolist()):
        by_label[lab].append(i)
    classes = sorted(by_label)
    if len(classes) < num_labels:
        raise SamplingError(f"need {num_labels} classes, dataset has {len(classes)}")
    chosen = rng.choice(len(classes), size=num_labels, replace=False)
    idx = []
    for c in chosen:
        members = np.asarray(by_label[classes[c]])
        replace = len(members) < instances_per_label
        idx.extend(rng.choice(members, size=instances_per_label, replace=replace).tolist())
    idx = np.asarray(idx, dtype=np.int64)
    return PKBatch(idx, labels[idx], num_labels, instances_per_label)


def distance_matrix(embeddings, metric: str = "euclidean") -> Tensor:
    """Differentiable pairwise distances with an exactly zero diagonal."""
    x = embeddings if isinstance(embeddings, Tensor) else Tensor(np.asarray(embeddings))
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("distance_matrix needs an [N, D] matrix with N >= 2")
    n = x.shape[0]
    off_diag = ~np.eye(n, dtype=bool)
    if metric == "euclidean":
        diff = x.reshape(n, 1, -1) - x.reshape(1, n, -1)
        d = ad.sqrt((diff * diff).sum(axis=-1))
    elif metric == "cosine":
        norms = np.linalg.norm(x.data, axis=1)
        if np.any(norms == 0):
            raise ValueError("cosine distance undefined for zero-norm rows")
        u = ad.l2_normalize(x, axis=1, eps=0.0)
        d = 1.0 - u @ u.transpose()
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return ad.where(off_diag, d, 0.0)


def _check_labels(labels: np.ndarray) -> None:
    uniq, counts = np.unique(labels, return_counts=True)
    if len(uniq) < 2:
        raise MiningError("need at least two distinct labels")
    if np.any(counts < 2):
        raise MiningError(f"labels with a single instance: {uniq[counts < 2].tolist()}")


def mine_hard_triplets(dist, labels: Sequence) -> list[Triplet]:
    """Per anchor: farthest same-label item and nearest other-label item (lowest index on ties)."""
    d = dist.data if isinstance(dist, Tensor) else np.asarray(dist)
    labels = np.asarray(labels)
    _check_labels(labels)
    n = len(labels)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    pos = np.argmax(np.where(pos_mask, d, -np.inf), axis=1)
    neg = np.argmin(np.where(same, np.inf, d), axis=1)
    return [Triplet(i, int(pos[i]), int(neg[i])) for i in range(n)]


def triplet_loss(d_qp, d_qn, margin: float = DEFAULT_MARGIN):
    """max(0, d(q,p) - d(q,n) + m) for floats or tensors."""
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    if isinstance(d_qp, Tensor) or isinstance(d_qn, Tensor):
        return ad.relu(d_qp - d_qn + margin)
    return max(0.0, d_qp - d_qn + margin)


def batch_triplet_loss(dist: Tensor, triplets: Sequence[Triplet], margin: float = DEFAULT_MARGIN) -> Tensor:
    a, p, n = (np.asarray(col, dtype=np.int64) for col in zip(*triplets))
    return triplet_loss(dist[a, p], dist[a, n], margin).mean()


def mine_hard_pairs(dist, labels: Sequence, count_per_kind: int) -> PairMining:
    """Farthest positive pairs and nearest negative pairs, each unordered pair once (i < j)."""
    d = dist.data if isinstance(dist, Tensor) else np.asarray(dist)
    labels = np.asarray(labels)
    iu, ju = np.triu_indices(len(labels), k=1)
    vals = d[iu, ju]
    same = labels[iu] == labels[ju]
    if not same.any() or same.all():
        raise MiningError("need at least one positive and one negative pair")

    # lexsort keys: last is primary
    pos_idx = np.flatnonzero(same)
    pos_order = pos_idx[np.lexsort((ju[pos_idx], iu[pos_idx], -vals[pos_idx]))]
    neg_idx = np.flatnonzero(~same)
    neg_order = neg_idx[np.lexsort((ju[neg_idx], iu[neg_idx], vals[neg_idx]))]

    insufficient = count_per_kind > len(pos_order) or count_per_kind > len(neg_order)
    if insufficient:
        log.debug(
            "requested %d pairs per kind; only %d positive / %d negative available",
            count_per_kind,
            len(pos_order),
            len(neg_order),
        )
    pairs = [LabeledPair(int(iu[k]), int(ju[k]), 0) for k in pos_order[:count_per_kind]]
    pairs += [LabeledPair(int(iu[k]), int(ju[k]), 1) for k in neg_order[:count_per_kind]]
    return PairMining(pairs, insufficient)
