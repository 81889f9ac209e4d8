"""Exact brute-force retrieval under fixed-split and leave-one-out protocols."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

METRICS = ("euclidean", "cosine")
# query-block x gallery x dim elements materialised at once for euclidean scoring
_BLOCK_ELEMS = 1 << 22


class RetrievalError(ValueError):
    pass


class Entry(NamedTuple):
    gallery_id: str
    score: float
    rescored: bool = False


@dataclass
class RankedList:
    query_id: str
    entries: list[Entry] = field(default_factory=list)

    @property
    def ids(self) -> list[str]:
        return [e.gallery_id for e in self.entries]

    @property
    def scores(self) -> list[float]:
        return [e.score for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def check(self, leave_one_out: bool = False) -> None:
        """Raise if a retrieval list breaks ordering, uniqueness or self-exclusion."""
        s = np.asarray(self.scores)
        if np.any(np.diff(s) < 0):
            raise RetrievalError(f"{self.query_id}: scores not ascending")
        if len(set(self.ids)) != len(self.ids):
            raise RetrievalError(f"{self.query_id}: duplicate gallery ids")
        if leave_one_out and self.query_id in self.ids:
            raise RetrievalError(f"{self.query_id}: query returned under leave-one-out")


@dataclass(frozen=True)
class GalleryIndex:
    ids: tuple[str, ...]
    embeddings: np.ndarray  # float64, unit rows when metric == "cosine"
    labels: tuple
    metric: str
    id_rank: np.ndarray = field(repr=False)  # position of each row in sorted-id order
    row_of: dict = field(repr=False)

    def __len__(self) -> int:
        return len(self.ids)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise RetrievalError("zero-norm embedding cannot be used with the cosine metric")
    return x / norms


def build_index(ids: Sequence[str], embeddings: np.ndarray, labels: Sequence, metric: str = "cosine") -> GalleryIndex:
    ids = tuple(ids)
    emb = np.asarray(embeddings, dtype=np.float64)
    if metric not in METRICS:
        raise RetrievalError(f"metric must be one of {METRICS}")
    if emb.ndim != 2 or emb.shape[0] != len(ids) or len(labels) != len(ids):
        raise RetrievalError("ids, embeddings and labels must have equal length")
    if len(set(ids)) != len(ids):
        raise RetrievalError("gallery ids must be unique")
    if metric == "cosine":
        emb = _unit_rows(emb)
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    id_rank = np.empty(len(ids), dtype=np.int64)
    id_rank[order] = np.arange(len(ids))
    return GalleryIndex(ids, emb, tuple(labels), metric, id_rank, {g: i for i, g in enumerate(ids)})


def score_matrix(index: GalleryIndex, queries: np.ndarray) -> np.ndarray:
    """Distances ``[n_queries, n_gallery]``: euclidean, or 1 - cosine similarity."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q.shape[1] != index.embeddings.shape[1]:
        raise RetrievalError(f"query dim {q.shape[1]} != index dim {index.embeddings.shape[1]}")
    if index.metric == "cosine":
        # einsum keeps each score independent of how queries are blocked
        return 1.0 - np.einsum("qd,gd->qg", _unit_rows(q), index.embeddings)
    g = index.embeddings
    out = np.empty((len(q), len(g)))
    step = max(1, _BLOCK_ELEMS // max(1, g.size))
    for s in range(0, len(q), step):
        diff = q[s : s + step, None, :] - g[None, :, :]
        out[s : s + step] = np.sqrt(np.einsum("qgd,qgd->qg", diff, diff))
    return out


def _rank_row(index: GalleryIndex, query_id: str, scores: np.ndarray, k: int, exclude_id) -> RankedList:
    valid = np.ones(len(index), dtype=bool)
    if exclude_id is not None and exclude_id in index.row_of:
        valid[index.row_of[exclude_id]] = False
    effective = int(valid.sum())
    if not 1 <= k <= effective:
        raise RetrievalError(f"k={k} outside [1, {effective}]")
    rows = np.flatnonzero(valid)
    order = rows[np.lexsort((index.id_rank[rows], scores[rows]))][:k]
    return RankedList(query_id, [Entry(index.ids[i], float(scores[i])) for i in order])


def search(index: GalleryIndex, query_embedding: np.ndarray, k: int, exclude_id: str | None = None, query_id: str = "") -> RankedList:
    """Exact top-k by ascending distance, ties by lowest gallery id; ``exclude_id`` is never returned."""
    scores = score_matrix(index, query_embedding)[0]
    return _rank_row(index, query_id, scores, k, exclude_id)


def run_protocol(
    query_ids: Sequence[str],
    query_embeddings: np.ndarray,
    index: GalleryIndex,
    protocol: str,
    k: int,
    workers: int = 1,
    block: int = 256,
) -> list[RankedList]:
    """One ranked list per query.  Under leave-one-out lists are clipped to N - 1."""
    query_ids = list(query_ids)
    q = np.asarray(query_embeddings, dtype=np.float64)
    if protocol == "fixed":
        overlap = set(query_ids) & set(index.ids)
        if overlap:
            raise RetrievalError(f"fixed split: {len(overlap)} query ids also in gallery")
        kk = k
        exclude = [None] * len(query_ids)
    elif protocol == "leave_one_out":
        if set(query_ids) != set(index.ids):
            raise RetrievalError("leave-one-out requires queries to equal the gallery")
        kk = min(k, len(index) - 1)
        exclude = query_ids
    else:
        raise RetrievalError(f"unknown protocol {protocol!r}")

    def run_block(start: int) -> list[RankedList]:
        scores = score_matrix(index, q[start : start + block])
        return [
            _rank_row(index, query_ids[start + i], scores[i], kk, exclude[start + i])
            for i in range(len(scores))
        ]

    starts = range(0, len(query_ids), block)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            blocks = list(pool.map(run_block, starts))
    else:
        blocks = [run_block(s) for s in starts]
    return [rl for b in blocks for rl in b]


def write_ranked_csv(path, lists: Sequence[RankedList], rescored_column: bool = False) -> None:
    header = ["query_id", "rank", "gallery_id", "score"] + (["rescored"] if rescored_column else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for rl in lists:
            for rank, e in enumerate(rl.entries, 1):
                row = [rl.query_id, rank, e.gallery_id, f"{e.score:.6f}"]
                if rescored_column:
                    row.append(int(e.rescored))
                w.writerow(row)


def read_ranked_csv(path) -> list[RankedList]:
    lists: dict[str, RankedList] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rl = lists.setdefault(row["query_id"], RankedList(row["query_id"]))
            rl.entries.append(Entry(row["gallery_id"], float(row["score"]), bool(int(row.get("rescored") or 0))))
    return list(lists.values())
