from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stir.index import Entry, RankedList
from stir.metrics import (
    MetricsError,
    RelevanceJudgment,
    ap_at_k,
    cmc_at_k,
    evaluate,
    judgments_from_labels,
    precision_at_k,
    recall_at_k,
    report_csv,
    report_text,
)


def J(relevant, q="q"):
    return RelevanceJudgment(q, frozenset(relevant))


def from_pattern(pattern):
    """Ranked ids g0, g1, ... with the relevant ones where pattern has a 1."""
    ids = [f"g{i}" for i in range(len(pattern))]
    rel = {g for g, r in zip(ids, pattern) if r}
    return ids, rel


# -- oracle written from the textual definitions -----------------------------------------
def oracle(ids, relevant, n_gt, k):
    r = [1 if g in relevant else 0 for g in ids[:k]]
    n_k = sum(r)
    cmc = 1 if n_k > 0 else 0
    recall = Fraction(n_k, n_gt)
    precision = Fraction(n_k, k)
    if n_k == 0:
        ap = Fraction(0)
    else:
        ap = sum((Fraction(sum(r[:i]), i) for i in range(1, len(r) + 1) if r[i - 1]), Fraction(0)) / n_k
    return {"cmc": Fraction(cmc), "recall": recall, "precision": precision, "map": ap}


def random_lists(rng, n):
    lists, judgments = [], {}
    for qi in range(n):
        length = int(rng.integers(0, 25))
        pool = [f"g{j}" for j in range(40)]
        ids = [pool[j] for j in rng.permutation(40)[:length]]
        n_gt = int(rng.integers(1, 8))
        relevant = set(rng.choice(pool, n_gt, replace=False).tolist())
        q = f"q{qi}"
        lists.append(RankedList(q, [Entry(g, float(s)) for s, g in enumerate(ids)]))
        judgments[q] = J(relevant, q)
    return lists, judgments


def test_oracle_1000_lists():
    rng = np.random.default_rng(99)
    lists, judgments = random_lists(rng, 1000)
    ks = [1, 2, 3, 5, 10, 30]
    fns = {"cmc": cmc_at_k, "recall": recall_at_k, "precision": precision_at_k, "map": ap_at_k}
    sums = {(m, k): Fraction(0) for m in fns for k in ks}
    for rl in lists:
        j = judgments[rl.query_id]
        for k in ks:
            want = oracle(rl.ids, j.relevant_ids, j.n_gt, k)
            for m, fn in fns.items():
                assert fn(rl, j, k) == float(want[m]), (m, k, rl.ids, j.relevant_ids)
                sums[(m, k)] += want[m]
            assert recall_at_k(rl, j, 1) <= 1 / j.n_gt
    report = evaluate(lists, judgments, ks)
    for (m, k), total in sums.items():
        assert report.get(m, k) == float(total / len(lists))


class TestExamples:
    def test_cmc(self):
        ids, rel = from_pattern([0, 0, 1, 0, 0])
        assert cmc_at_k(ids, J(rel), 5) == 1
        assert cmc_at_k(ids, J(rel), 2) == 0
        assert cmc_at_k(["a", "b"], J({"z"}), 10) == 0
        for k in (1, 4, 50):
            assert cmc_at_k(["a", "b"], J({"a"}), k) == 1

    def test_recall(self):
        ids, rel = from_pattern([1, 0, 1, 0, 0])
        assert recall_at_k(ids, J(rel | {"x", "y"}), 5) == 0.5
        assert recall_at_k(["a"], J({"a", "b", "c"}), 1) == pytest.approx(1 / 3)
        assert recall_at_k(["a", "b"], J({"a", "b"}), 2) == 1.0

    def test_precision(self):
        ids, rel = from_pattern([1, 0, 1, 0])
        assert precision_at_k(ids, J(rel), 4) == 0.5
        assert precision_at_k(["a"], J({"a"}), 1) == 1.0
        assert precision_at_k(["a", "b", "c"], J({"a", "b", "c"}), 5) == 0.6

    def test_ap(self):
        ids, rel = from_pattern([1, 0, 1])
        assert ap_at_k(ids, J(rel), 3) == 5 / 6
        ids, rel = from_pattern([1, 1, 1, 0])
        assert ap_at_k(ids, J(rel), 3) == 1.0
        assert ap_at_k(["a", "b"], J({"z"}), 2) == 0.0

    def test_bad_k(self):
        with pytest.raises(MetricsError):
            cmc_at_k(["a"], J({"a"}), 0)

    def test_judgment_contract(self):
        with pytest.raises(MetricsError):
            J(set())
        with pytest.raises(MetricsError):
            RelevanceJudgment("q", frozenset({"q"}))


class TestEvaluate:
    def test_single_query_perfect(self):
        rep = evaluate([RankedList("q", [Entry("a", 0.0)])], {"q": J({"a"})}, [1])
        assert rep.cmc[1] == rep.recall[1] == rep.precision[1] == rep.map[1] == 1.0

    def test_average(self):
        lists = [RankedList("q1", [Entry("a", 0.0)]), RankedList("q2", [Entry("b", 0.0)])]
        rep = evaluate(lists, {"q1": J({"a"}, "q1"), "q2": J({"a"}, "q2")}, [1])
        assert rep.cmc[1] == 0.5

    def test_missing_judgment(self):
        with pytest.raises(MetricsError):
            evaluate([RankedList("q", [])], {}, [1])

    def test_empty_k(self):
        with pytest.raises(MetricsError):
            evaluate([RankedList("q", [])], {"q": J({"a"})}, [])

    def test_order_independent(self):
        rng = np.random.default_rng(4)
        lists, judgments = random_lists(rng, 200)
        a = evaluate(lists, judgments, [1, 5, 10])
        b = evaluate(lists[::-1], judgments, [1, 5, 10])
        assert (a.cmc, a.recall, a.precision, a.map) == (b.cmc, b.recall, b.precision, b.map)

    def test_per_query_means(self):
        rng = np.random.default_rng(8)
        lists, judgments = random_lists(rng, 200)
        rep = evaluate(lists, judgments, [1, 5], keep_per_query=True)
        for k in (1, 5):
            mean = np.mean([rep.per_query[rl.query_id][("map", k)] for rl in lists])
            assert rep.map[k] == pytest.approx(mean, abs=1e-9)

    def test_single_ground_truth_cmc_equals_recall(self):
        rng = np.random.default_rng(1)
        lists, _ = random_lists(rng, 100)
        judgments = {rl.query_id: J({"g0"}, rl.query_id) for rl in lists}
        rep = evaluate(lists, judgments, [1, 3, 10])
        assert rep.cmc == rep.recall


@given(st.lists(st.booleans(), max_size=20), st.integers(0, 5))
def test_monotone_and_bounded(pattern, extra):
    ids, rel = from_pattern(pattern)
    j = J(rel | {f"missing{i}" for i in range(extra)} or {"missing"})
    prev_c = prev_r = 0
    for k in range(1, 25):
        c, r, ap = cmc_at_k(ids, j, k), recall_at_k(ids, j, k), ap_at_k(ids, j, k)
        assert c >= prev_c and r >= prev_r
        assert 0 <= ap <= 1
        prev_c, prev_r = c, r
    # AP is normalised by the hits found (n_k), so it is 1 exactly when those hits lead the list
    n_k = sum(pattern[:10])
    assert (ap_at_k(ids, j, 10) == 1.0) == (n_k > 0 and all(pattern[:n_k]))


def test_judgments_from_labels_excludes_self():
    js = judgments_from_labels(["a", "b"], [0, 1], ["a", "c", "d"], [0, 0, 1])
    assert js["a"].relevant_ids == {"c"}
    assert js["b"].relevant_ids == {"d"}


def test_reports():
    rep = evaluate([RankedList("q", [Entry("a", 0.0), Entry("b", 1.0)])], {"q": J({"b"})}, [1, 2])
    csv_text = report_csv([("ViT-Triplet", rep)])
    assert csv_text.splitlines()[0].startswith("model,queries,cmc@1,cmc@2")
    assert "ViT-Triplet,1,0.000000,1.000000" in csv_text
    text = report_text([("ViT-Triplet", rep), ("STIR", rep)])
    assert "CMC metric" in text and "mAP metric" in text and "100.0" in text
    with pytest.raises(MetricsError):
        report_text([])
