"""Top-n postprocessing of ranked lists with a pairwise scorer."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .index import Entry, RankedList
from .vit import EncoderWeights, score_pairs


class ResolutionError(KeyError):
    pass


class PairwiseScorer:
    """Maps (query item, gallery item) to a value in (0, 1); lower means more similar.

    Subclasses implement :meth:`score_pairs`, which scores aligned batches in
    one call.
    """

    def score_pairs(self, left: Sequence, right: Sequence) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, a, b) -> float:
        return float(self.score_pairs([a], [b])[0])


class FunctionScorer(PairwiseScorer):
    def __init__(self, fn: Callable[[object, object], float]):
        self.fn = fn

    def score_pairs(self, left, right) -> np.ndarray:
        return np.array([self.fn(a, b) for a, b in zip(left, right)], dtype=np.float64)


class SwappedScorer(PairwiseScorer):
    """The same scorer with its arguments reversed."""

    def __init__(self, inner: PairwiseScorer):
        self.inner = inner

    def score_pairs(self, left, right) -> np.ndarray:
        return self.inner.score_pairs(right, left)


class STIRScorer(PairwiseScorer):
    """Eval-mode pair transformer over width-concatenated images."""

    def __init__(self, weights: EncoderWeights):
        self.weights = weights

    def score_pairs(self, left, right) -> np.ndarray:
        if len(left) == 0:
            return np.zeros(0)
        return score_pairs(np.stack(left), np.stack(right), self.weights)


@dataclass(frozen=True)
class RerankConfig:
    n: int = 5
    symmetric: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("rerank depth n must be >= 1")


def symmetric_score(scorer: PairwiseScorer, a, b) -> float:
    return (scorer(a, b) + scorer(b, a)) / 2


def _resolve(resolver, item_id):
    try:
        return resolver[item_id] if isinstance(resolver, Mapping) else resolver(item_id)
    except KeyError as exc:
        raise ResolutionError(item_id) from exc


def rerank(ranked: RankedList, scorer: PairwiseScorer, config: RerankConfig, resolver) -> RankedList:
    """Rescore the first n entries and sort them among themselves; the tail is untouched."""
    if not ranked.entries:
        raise ValueError(f"{ranked.query_id}: cannot rerank an empty list")
    m = min(config.n, len(ranked))
    head = ranked.entries[:m]
    q = _resolve(resolver, ranked.query_id)
    gs = [_resolve(resolver, e.gallery_id) for e in head]
    qs = [q] * m
    scores = scorer.score_pairs(qs, gs)
    if config.symmetric:
        scores = (scores + scorer.score_pairs(gs, qs)) / 2
    # stable: equal new scores keep their original order
    order = np.argsort(scores, kind="stable")
    new_head = [Entry(head[i].gallery_id, float(scores[i]), True) for i in order]
    return RankedList(ranked.query_id, new_head + list(ranked.entries[m:]))


def rerank_all(
    lists: Sequence[RankedList],
    scorer: PairwiseScorer,
    config: RerankConfig,
    resolver,
    workers: int = 1,
) -> list[RankedList]:
    def one(rl):
        return rerank(rl, scorer, config, resolver)

    if workers > 1 and len(lists) > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, lists))
    return [one(rl) for rl in lists]
