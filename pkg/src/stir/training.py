"""Training loops for the triplet encoder and the pair reranker."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .data import augment_batch
from .mining import (
    DEFAULT_MARGIN,
    batch_triplet_loss,
    distance_matrix,
    mine_hard_pairs,
    mine_hard_triplets,
    pk_sample,
)
from .vit import HEAD_PARAMS, EncoderWeights, forward_embed, forward_pair, pair_features, pair_head

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainHyper:
    margin: float = DEFAULT_MARGIN
    metric: str = "euclidean"
    num_labels: int = 8
    instances_per_label: int = 4
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 30
    batches_per_epoch: int | None = None  # default: ceil(len(dataset) / (P*K))
    flip: bool = True
    crop_scale: tuple[float, float] | None = (0.2, 1.0)
    # reranker
    head_lr: float = 2e-3
    head_only_epochs: int = 3
    pairs_per_kind: int | None = None  # default: P*K // 2
    views: int = 1  # size of the per-image view pool for the cached head-only phase
    seed: int = 0

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")
        if self.metric not in ("euclidean", "cosine"):
            raise ValueError("metric must be 'euclidean' or 'cosine'")
        for name in ("num_labels", "instances_per_label", "views"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("lr", "head_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.head_only_epochs < 0:
            raise ValueError("epoch counts must be nonnegative")


class AdamW:
    """Adam with decoupled weight decay; state keyed by parameter name."""

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 1e-2):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, weights: EncoderWeights, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        for name, g in grads.items():
            p = weights.params[name]
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            t = self.t.get(name, 0) + 1
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            new = p * (1 - lr * self.weight_decay) - lr * mhat / (np.sqrt(vhat) + self.eps)
            weights.params[name] = new.astype(p.dtype)
            self.m[name], self.v[name], self.t[name] = m, v, t


def _epoch_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, stream])


def _num_batches(n_items: int, hyper: TrainHyper, num_labels: int) -> int:
    if hyper.batches_per_epoch is not None:
        return hyper.batches_per_epoch
    return max(1, math.ceil(n_items / (num_labels * hyper.instances_per_label)))


def _collect(params: dict[str, ad.Tensor], names: Iterable[str]) -> dict[str, np.ndarray]:
    return {n: params[n].grad if params[n].grad is not None else np.zeros_like(params[n].data) for n in names}


def triplet_batch_loss(weights: EncoderWeights, images: np.ndarray, labels: np.ndarray, hyper: TrainHyper, trainable: Sequence[str] = ()):
    """Encode, mine batch-hard triplets, mean margin loss.  Returns (loss tensor, params)."""
    params = weights.tensors(trainable)
    emb = forward_embed(params, images, weights.config)
    dist = distance_matrix(emb, hyper.metric)
    triplets = mine_hard_triplets(dist, labels)
    return batch_triplet_loss(dist, triplets, hyper.margin), params


def train_triplet_epoch(
    images: np.ndarray,
    labels: Sequence,
    weights: EncoderWeights,
    optimizer: AdamW,
    hyper: TrainHyper,
    epoch: int,
) -> float:
    """One epoch of PK batches with batch-hard triplet loss; updates ``weights`` in place."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty training set")
    rng = _epoch_rng(hyper.seed, epoch, 0)
    names = weights.embedding_names()
    losses = []
    for _ in range(_num_batches(len(labels), hyper, hyper.num_labels)):
        batch = pk_sample(labels, hyper.num_labels, hyper.instances_per_label, rng)
        imgs = augment_batch(images[batch.indices], rng, hyper.flip, hyper.crop_scale)
        loss, params = triplet_batch_loss(weights, imgs, batch.labels, hyper, names)
        losses.append(loss.item())
        if loss.requires_grad:
            ad.backward(loss)
        optimizer.step(weights, _collect(params, names), hyper.lr)
    return float(np.mean(losses))


def _mine_pairs(emb: np.ndarray, labels: np.ndarray, hyper: TrainHyper):
    dist = distance_matrix(emb, hyper.metric)
    count = hyper.pairs_per_kind or len(labels) // 2
    mined = mine_hard_pairs(dist, labels, count)
    a = np.array([p.a for p in mined.pairs])
    b = np.array([p.b for p in mined.pairs])
    y = np.array([p.is_negative for p in mined.pairs], dtype=np.float64)
    return a, b, y


def stir_batch_loss(
    weights: EncoderWeights,
    images: np.ndarray,
    labels: np.ndarray,
    hyper: TrainHyper,
    trainable: Sequence[str] = (),
    rng: np.random.Generator | None = None,
    train: bool = True,
):
    """Mine hard pairs from current embeddings, score the glued pairs, mean BCE."""
    frozen = weights.tensors()
    emb = forward_embed(frozen, images, weights.config).data
    a, b, y = _mine_pairs(emb, labels, hyper)
    params = weights.tensors(trainable)
    probs = forward_pair(params, images[a], images[b], weights.config, train=train, rng=rng)
    return ad.bce_loss(probs, y), params


class FrozenPairCache:
    """A fixed pool of image views with memoised embeddings and pair features.

    While only the head trains, the encoder is frozen, so pair features
    depend on nothing but the two views.  The pool holds every training image
    once as-is plus ``views - 1`` augmented copies, drawn once up front.
    Features are computed on first use and keyed by pool indices.
    """

    def __init__(
        self,
        images: np.ndarray,
        labels: Sequence,
        weights: EncoderWeights,
        views: int = 1,
        rng: np.random.Generator | None = None,
        flip: bool = False,
        crop_scale: tuple[float, float] | None = None,
        chunk: int = 128,
    ):
        if views < 1:
            raise ValueError("views must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        copies = [np.asarray(images)] + [augment_batch(images, rng, flip, crop_scale) for _ in range(views - 1)]
        self.images = np.concatenate(copies)
        self.labels = np.tile(np.asarray(labels), views)
        self.weights = weights
        self.chunk = chunk
        params = weights.tensors()
        self.embeddings = np.concatenate(
            [forward_embed(params, self.images[i : i + chunk], weights.config).data for i in range(0, len(self.images), chunk)]
        )
        self._features: dict[tuple[int, int], np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.images)

    def features(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        keys = list(zip(a.tolist(), b.tolist()))
        missing = sorted(set(keys) - self._features.keys())
        if missing:
            params = self.weights.tensors()
            for start in range(0, len(missing), self.chunk):
                block = missing[start : start + self.chunk]
                ia = np.array([k[0] for k in block])
                ib = np.array([k[1] for k in block])
                feats = pair_features(params, self.images[ia], self.images[ib], self.weights.config).data
                self._features.update(zip(block, feats))
        return np.stack([self._features[k] for k in keys])


def train_stir_epoch(
    images: np.ndarray,
    labels: Sequence,
    weights: EncoderWeights,
    optimizer: AdamW,
    hyper: TrainHyper,
    epoch: int,
    cache: FrozenPairCache | None = None,
) -> float:
    """One epoch of pair-reranker training; head only while ``epoch < head_only_epochs``.

    During the head-only phase a ``FrozenPairCache`` (built from the current
    weights) replaces ``images``/``labels`` and on-the-fly augmentation: batches
    are drawn from its view pool and the encoder forward pass is memoised.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty training set")
    head_only = epoch < hyper.head_only_epochs
    names = list(HEAD_PARAMS) if head_only else weights.pair_names()
    lr = hyper.head_lr if head_only else hyper.lr
    use_cache = cache is not None and head_only
    rng = _epoch_rng(hyper.seed, epoch, 1)
    source_labels = cache.labels if use_cache else labels
    losses = []
    for _ in range(_num_batches(len(labels), hyper, hyper.num_labels)):
        batch = pk_sample(source_labels, hyper.num_labels, hyper.instances_per_label, rng)
        if use_cache:
            a, b, y = _mine_pairs(cache.embeddings[batch.indices], batch.labels, hyper)
            params = weights.tensors(names)
            feats = ad.Tensor(cache.features(batch.indices[a], batch.indices[b]), dtype=weights.params["patch.w"].dtype)
            loss = ad.bce_loss(pair_head(feats, params, weights.config, True, rng), y)
        else:
            imgs = augment_batch(images[batch.indices], rng, hyper.flip, hyper.crop_scale)
            loss, params = stir_batch_loss(weights, imgs, batch.labels, hyper, names, rng)
        losses.append(loss.item())
        ad.backward(loss)
        optimizer.step(weights, _collect(params, names), lr)
    return float(np.mean(losses))


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)

    def csv(self) -> str:
        return "epoch,mean_loss\n" + "".join(f"{i},{v:.8f}\n" for i, v in enumerate(self.losses))
