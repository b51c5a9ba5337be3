import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skgc.evaluation import (RankingReport, build_filter, evaluate, filtered_rank,
                             indegree_report, metrics_from_ranks)
from skgc.kg import build_graph
from skgc.predictor import Predictor, PredictorParams


def sort_oracle(scores, gold, known):
    """Rank of gold in the descending-sorted surviving list, best placement among ties."""
    keep = [i for i in range(len(scores)) if i == gold or i not in set(known)]
    order = sorted(keep, key=lambda i: -scores[i])
    above = [i for i in order if scores[i] > scores[gold]]
    tied = [i for i in order if scores[i] == scores[gold] and i != gold]
    return len(above) + 1, len(tied)


def test_unique_max_is_rank_one():
    assert filtered_rank([0.1, 0.9, 0.3], 1, set()) == 1


def test_out_of_range_gold():
    with pytest.raises(IndexError):
        filtered_rank([0.1, 0.2], 5, set())


def test_ties_need_rng():
    with pytest.raises(ValueError):
        filtered_rank([0.5, 0.5], 0, set())


def test_random_protocol_four_way_tie():
    rng = np.random.default_rng(0)
    ranks = [filtered_rank([0.2, 0.7, 0.7, 0.7, 0.7], 1, set(), rng) for _ in range(10_000)]
    assert set(ranks) == {1, 2, 3, 4}
    assert abs(np.mean(ranks) - 2.5) <= 0.05


def test_filtered_toy_case():
    scores = [0.9, 0.8, 0.4, 0.8, 0.1]
    # entity 0 is another valid answer, so it leaves contention
    assert filtered_rank(scores, 2, {0, 2}) == 3
    assert filtered_rank(scores, 2, set()) == 4


def test_matches_sort_oracle_on_random_cases():
    rng = np.random.default_rng(5)
    for _ in range(200):
        n = int(rng.integers(2, 12))
        scores = rng.integers(0, 4, size=n).astype(float)  # coarse values force ties
        gold = int(rng.integers(n))
        known = set(rng.choice(n, size=int(rng.integers(0, n)), replace=False).tolist())
        lo, ties = sort_oracle(scores, gold, known)
        r = filtered_rank(scores, gold, known, np.random.default_rng(0))
        assert lo <= r <= lo + ties
        if ties == 0:
            assert r == lo


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=10), st.data())
def test_rank_properties(scores, data):
    n = len(scores)
    gold = data.draw(st.integers(0, n - 1))
    seed = data.draw(st.integers(0, 1000))
    rank = filtered_rank(scores, gold, set(), np.random.default_rng(seed))
    assert 1 <= rank <= n
    lower = [i for i in range(n) if scores[i] < scores[gold]]
    if lower:
        assert filtered_rank(scores, gold, {lower[0]}, np.random.default_rng(seed)) == rank
    raised = list(scores)
    raised[gold] += 1.0
    assert filtered_rank(raised, gold, set(), np.random.default_rng(seed)) <= rank
    if scores.count(scores[gold]) == 1:
        assert filtered_rank(scores, gold, set(), np.random.default_rng(seed + 1)) == rank


def test_metric_arithmetic():
    m = metrics_from_ranks([1, 2, 4])
    assert m["mrr"] == pytest.approx((1 + 0.5 + 0.25) / 3)
    assert metrics_from_ranks([1, 12])["hits@10"] == 50.0
    assert m["hits@1"] <= m["hits@3"] <= m["hits@10"]


class FixedScores:
    """Stand-in predictor with a hand-written score table per (source, relation)."""

    def __init__(self, graph, table):
        self.graph, self.table = graph, table

    def encode(self):
        return None

    def score_queries(self, sources, relations, enc=None):
        return np.array([self.table[(s, r)] for s, r in zip(sources, relations)])


def toy():
    g = build_graph([("A", "r", "B"), ("B", "r", "C"), ("C", "s", "A"), ("A", "s", "D")])
    return g


def test_evaluate_against_hand_table():
    g = toy()
    A, B, C, D = range(4)
    r, s = 0, 1
    R = g.n_relations
    test = np.array([[A, r, C], [B, s, D]])
    table = {
        (A, r): [0.0, 0.9, 0.5, 0.1],      # B known valid -> filtered; C rank 1
        (C, r + R): [0.3, 0.8, 0.1, 0.2],  # head query for (A,r,C): B is valid head of C? yes -> filtered
        (B, s): [0.4, 0.0, 0.6, 0.5],      # gold D: C above -> rank 2
        (D, s + R): [0.1, 0.2, 0.3, 0.0],  # gold B: A is known head of D (A,s,D) -> filtered; C above -> 2
    }
    filt = build_filter(g, g.triples, test)
    rep = evaluate(FixedScores(g, table), test, filt, seed=0, bucket_edges=None)
    assert rep.ranks == [1, 2, 1, 2]
    assert [q[3] for q in rep.queries] == ["tail", "tail", "head", "head"]
    assert rep.metrics["mrr"] == pytest.approx(0.75)
    assert rep.metrics["hits@1"] == 50.0


def test_filter_covers_both_directions():
    g = toy()
    filt = build_filter(g, g.triples)
    assert filt[(0, 0)] == {1}
    assert filt[(1, g.inverse(0))] == {0}


def test_indegree_buckets(tmp_path):
    g = toy()
    rep = RankingReport([(0, 0, 1, "tail"), (0, 1, 3, "tail"), (1, 0, 2, "tail"), (2, 1, 0, "tail")],
                        [1, 2, 4, 1], metrics_from_ranks([1, 2, 4, 1]))
    one = indegree_report(rep, g, [(0, None)])
    assert one[0]["mrr"] == pytest.approx(rep.metrics["mrr"]) and one[0]["n"] == 4
    # in-degrees: A=1, B=1, C=1, D=1 -> everything in the low bucket
    two = indegree_report(rep, g, [(0, 1), (2, None)])
    assert [b["n"] for b in two] == [4, 0]
    star = build_graph([("a", "r", "hub"), ("b", "r", "hub"), ("c", "r", "hub"), ("hub", "r", "a")])
    rep2 = RankingReport([(0, 0, 1, "tail"), (2, 0, 1, "tail"), (1, 0, 0, "tail")], [1, 3, 2],
                         metrics_from_ranks([1, 3, 2]))
    groups = indegree_report(rep2, star, [(0, 1), (2, None)])
    assert [b["n"] for b in groups] == [1, 2]
    assert groups[0]["mrr"] == pytest.approx(0.5)
    assert groups[1]["mrr"] == pytest.approx((1 + 1 / 3) / 2)
    with pytest.raises(ValueError):
        indegree_report(rep2, star, [(5, None)])


def test_report_outputs(tmp_path):
    g = toy()
    params = PredictorParams.init(4, g.n_aug_relations, 4, np.random.default_rng(0))
    rep = evaluate(Predictor(g, params), g.triples, build_filter(g, g.triples), seed=1)
    assert sum(b["n"] for b in rep.buckets) == len(rep.ranks) == 8
    assert 0 < rep.metrics["mrr"] <= 1
    assert json.loads(rep.to_json())["metrics"]["n"] == 8
    assert "MRR" in rep.to_table()
    rep.dump_ranks(tmp_path / "r.tsv", g)
    lines = (tmp_path / "r.tsv").read_text().splitlines()
    assert len(lines) == 8 and lines[0].split("\t")[3] == "tail"
    again = evaluate(Predictor(g, params), g.triples, build_filter(g, g.triples), seed=1)
    assert again.ranks == rep.ranks
