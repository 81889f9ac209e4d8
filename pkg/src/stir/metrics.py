"""CMC, Recall, Precision and (m)AP at k, plus table-shaped report emission.

CMC@k is the hit indicator that metric-learning papers often call "recall";
Recall@k here is the classical n_k / n_gt.
"""

from __future__ import annotations

import csv
import io
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .index import RankedList


METRICS = ("cmc", "recall", "precision", "map")


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class RelevanceJudgment:
    query_id: str
    relevant_ids: frozenset

    def __post_init__(self):
        if not self.relevant_ids:
            raise MetricsError(f"{self.query_id}: judgment needs at least one relevant id")
        if self.query_id in self.relevant_ids:
            raise MetricsError(f"{self.query_id}: query cannot be relevant to itself")

    @property
    def n_gt(self) -> int:
        return len(self.relevant_ids)


def _ids(ranked) -> list:
    return ranked.ids if isinstance(ranked, RankedList) else list(ranked)


def _hits(ranked, judgment: RelevanceJudgment, k: int) -> list[bool]:
    if k < 1:
        raise MetricsError("k must be >= 1")
    return [g in judgment.relevant_ids for g in _ids(ranked)[:k]]


# Each metric is computed as an exact rational and rounded once, so results do
# not depend on summation order and agree bit-for-bit with any exact evaluator.
def _cmc(hits: list[bool]) -> Fraction:
    return Fraction(int(any(hits)))


def _recall(hits: list[bool], judgment: RelevanceJudgment) -> Fraction:
    return Fraction(sum(hits), judgment.n_gt)


def _precision(hits: list[bool], k: int) -> Fraction:
    # denominator is k even when the list is shorter
    return Fraction(sum(hits), k)


def _ap(hits: list[bool]) -> Fraction:
    found = 0
    total = Fraction(0)
    for i, hit in enumerate(hits, 1):
        if hit:
            found += 1
            total += Fraction(found, i)
    return total / found if found else Fraction(0)


def cmc_at_k(ranked, judgment: RelevanceJudgment, k: int) -> int:
    return int(_cmc(_hits(ranked, judgment, k)))


def recall_at_k(ranked, judgment: RelevanceJudgment, k: int) -> float:
    return float(_recall(_hits(ranked, judgment, k), judgment))


def precision_at_k(ranked, judgment: RelevanceJudgment, k: int) -> float:
    return float(_precision(_hits(ranked, judgment, k), k))


def ap_at_k(ranked, judgment: RelevanceJudgment, k: int) -> float:
    """Mean of Precision@i over relevant positions i <= k; 0 when none is relevant."""
    return float(_ap(_hits(ranked, judgment, k)))


@dataclass
class MetricsReport:
    k_values: tuple[int, ...]
    cmc: dict[int, float]
    recall: dict[int, float]
    precision: dict[int, float]
    map: dict[int, float]
    num_queries: int
    per_query: dict = field(default_factory=dict, repr=False, compare=False)

    def get(self, metric: str, k: int) -> float:
        return getattr(self, metric)[k]


def evaluate(
    lists: Sequence[RankedList],
    judgments: Mapping[str, RelevanceJudgment],
    k_values: Sequence[int],
    keep_per_query: bool = False,
) -> MetricsReport:
    """Per-k means over queries, summed exactly so query order does not matter."""
    k_values = tuple(sorted(set(int(k) for k in k_values)))
    if not k_values:
        raise MetricsError("k_values must be nonempty")
    if any(k < 1 for k in k_values):
        raise MetricsError("k values must be >= 1")
    if not lists:
        raise MetricsError("no ranked lists to evaluate")
    sums = {m: {k: Fraction(0) for k in k_values} for m in METRICS}
    per_query = {}
    for rl in lists:
        if rl.query_id not in judgments:
            raise MetricsError(f"no relevance judgment for query {rl.query_id}")
        j = judgments[rl.query_id]
        full = _hits(rl, j, k_values[-1])
        row = {}
        for k in k_values:
            hits = full[:k]
            exact = {"cmc": _cmc(hits), "recall": _recall(hits, j), "precision": _precision(hits, k), "map": _ap(hits)}
            for m, v in exact.items():
                sums[m][k] += v
                row[(m, k)] = float(v)
        if keep_per_query:
            per_query[rl.query_id] = row
    n = len(lists)
    means = {m: {k: float(v / n) for k, v in by_k.items()} for m, by_k in sums.items()}
    return MetricsReport(k_values, means["cmc"], means["recall"], means["precision"], means["map"], n, per_query)


def judgments_from_labels(
    query_ids: Sequence[str],
    query_labels: Sequence,
    gallery_ids: Sequence[str],
    gallery_labels: Sequence,
) -> dict[str, RelevanceJudgment]:
    """Relevant = same-label gallery items other than the query itself."""
    by_label: dict = {}
    for g, lab in zip(gallery_ids, gallery_labels):
        by_label.setdefault(lab, set()).add(g)
    out = {}
    for q, lab in zip(query_ids, query_labels):
        out[q] = RelevanceJudgment(q, frozenset(by_label.get(lab, set()) - {q}))
    return out


# -- report emission ----------------------------------------------------------------
METRIC_TITLES = {"cmc": "CMC", "recall": "Recall", "precision": "Precision", "map": "mAP"}


def report_columns(report: MetricsReport, metrics: Sequence[str] = METRICS) -> list[tuple[str, int]]:
    return [(m, k) for m in metrics for k in report.k_values]


def report_csv(rows: Sequence[tuple[str, MetricsReport]]) -> str:
    """One row per model variant, one column per metric@k (fractions, 6 decimals)."""
    if not rows:
        raise MetricsError("no rows to report")
    cols = report_columns(rows[0][1])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "queries"] + [f"{m}@{k}" for m, k in cols])
    for name, rep in rows:
        w.writerow([name, rep.num_queries] + [f"{rep.get(m, k):.6f}" for m, k in cols])
    return buf.getvalue()


def _table(title: str, rows: Sequence[tuple[str, MetricsReport]], metric: str) -> str:
    ks = rows[0][1].k_values
    head = ["Model"] + [f"@{k}" for k in ks]
    body = [[name] + [f"{100 * rep.get(metric, k):.1f}" for k in ks] for name, rep in rows]
    widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]

    def fmt(r):
        return "  ".join([r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])])

    rule = "-" * len(fmt(head))
    return "\n".join([title, rule, fmt(head), rule, *map(fmt, body), rule])


def report_text(rows: Sequence[tuple[str, MetricsReport]], metrics: Sequence[str] = ("cmc", "map")) -> str:
    """Aligned text tables (percent), one block per metric: CMC then mAP by default."""
    if not rows:
        raise MetricsError("no rows to report")
    return "\n\n".join(_table(f"{METRIC_TITLES[m]} metric", rows, m) for m in metrics) + "\n"
