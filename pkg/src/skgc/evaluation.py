"""Filtered link-prediction ranking with the RANDOM tie protocol."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .kg import KnowledgeGraph

DEFAULT_BUCKETS = [(0, 1), (2, 3), (4, 7), (8, 15), (16, None)]


def filtered_rank(scores, gold: int, known_valid, rng: np.random.Generator | None = None) -> int:
    """1 + #(filtered entities scoring strictly above gold) + uniform tie slot.

    ``known_valid`` entities other than ``gold`` are removed from contention.
    Exact float equality defines a tie. ``rng`` is only consulted when ties
    exist.
    """
    scores = np.asarray(scores)
    if not 0 <= gold < len(scores):
        raise IndexError(f"gold entity {gold} outside score vector of length {len(scores)}")
    g = scores[gold]
    mask = np.ones(len(scores), dtype=bool)
    for e in known_valid:
        if e != gold:
            mask[e] = False
    mask[gold] = False
    higher = int(np.count_nonzero(scores[mask] > g))
    ties = int(np.count_nonzero(scores[mask] == g))
    if ties == 0:
        return higher + 1
    if rng is None:
        raise ValueError("tied scores need an rng for the RANDOM protocol")
    return higher + 1 + int(rng.integers(0, ties + 1))


def metrics_from_ranks(ranks) -> dict:
    ranks = np.asarray(ranks, dtype=float)
    if len(ranks) == 0:
        return {"mrr": 0.0, "hits@1": 0.0, "hits@3": 0.0, "hits@10": 0.0, "n": 0}
    return {
        "mrr": float(np.mean(1.0 / ranks)),
        "hits@1": float(np.mean(ranks <= 1) * 100),
        "hits@3": float(np.mean(ranks <= 3) * 100),
        "hits@10": float(np.mean(ranks <= 10) * 100),
        "n": int(len(ranks)),
    }


@dataclass
class RankingReport:
    queries: list          # (source, relation, gold, direction)
    ranks: list
    metrics: dict
    buckets: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"metrics": self.metrics, "buckets": self.buckets}, indent=2)

    def to_table(self) -> str:
        m = self.metrics
        lines = [f"{'queries':>8} {'MRR':>8} {'H@1':>7} {'H@3':>7} {'H@10':>7}",
                 f"{m['n']:>8} {m['mrr']:>8.4f} {m['hits@1']:>7.2f} {m['hits@3']:>7.2f} {m['hits@10']:>7.2f}"]
        if self.buckets:
            lines.append("")
            lines.append(f"{'in-degree':>10} {'queries':>8} {'MRR':>8}")
            for b in self.buckets:
                lines.append(f"{b['label']:>10} {b['n']:>8} {b['mrr']:>8.4f}")
        return "\n".join(lines)

    def dump_ranks(self, path, graph: KnowledgeGraph | None = None) -> None:
        with open(path, "w") as f:
            for (s, r, g, d), rank in zip(self.queries, self.ranks):
                if graph is not None:
                    s, r, g = graph.entities[s], graph.relation_name(r), graph.entities[g]
                f.write(f"{s}\t{r}\t{g}\t{d}\t{rank}\n")


def build_filter(graph: KnowledgeGraph, *splits: np.ndarray) -> dict:
    """(source, relation) -> set of valid answers, both directions, over all splits."""
    filt = defaultdict(set)
    R = graph.n_relations
    for arr in splits:
        for h, r, t in np.asarray(arr).reshape(-1, 3).tolist():
            filt[(h, r)].add(t)
            filt[(t, r + R)].add(h)
    return filt


def evaluate(predictor, triples: np.ndarray, filt: dict, seed: int = 0,
             bucket_edges=DEFAULT_BUCKETS, batch_size: int = 256) -> RankingReport:
    """Rank gold answers for tail queries and inverse (head) queries of ``triples``."""
    g = predictor.graph
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    R = g.n_relations
    queries = [(h, r, t, "tail") for h, r, t in triples.tolist()]
    queries += [(t, r + R, h, "head") for h, r, t in triples.tolist()]
    enc = predictor.encode()
    ranks = []
    for lo in range(0, len(queries), batch_size):
        chunk = queries[lo:lo + batch_size]
        S = predictor.score_queries([q[0] for q in chunk], [q[1] for q in chunk], enc)
        for j, (s, r, gold, _) in enumerate(chunk):
            row = S[j]
            known = filt.get((s, r), ())
            # per-query stream so results do not depend on batching
            rng = np.random.default_rng([seed, lo + j])
            ranks.append(filtered_rank(row, gold, known, rng))
    report = RankingReport(queries, ranks, metrics_from_ranks(ranks))
    if bucket_edges:
        report.buckets = indegree_report(report, g, bucket_edges)
    return report


def _bucket_label(lo, hi):
    return f"{lo}+" if hi is None else (f"{lo}" if lo == hi else f"{lo}-{hi}")


def indegree_report(report: RankingReport, graph: KnowledgeGraph, bucket_edges=DEFAULT_BUCKETS) -> list:
    """Group queries by the training in-degree of the gold entity."""
    deg = graph.in_degree
    groups: list[list] = [[] for _ in bucket_edges]
    for (s, r, gold, _), rank in zip(report.queries, report.ranks):
        k = int(deg[gold])
        for i, (lo, hi) in enumerate(bucket_edges):
            if k >= lo and (hi is None or k <= hi):
                groups[i].append(rank)
                break
        else:
            raise ValueError(f"in-degree {k} not covered by buckets {bucket_edges}")
    out = []
    for (lo, hi), rs in zip(bucket_edges, groups):
        m = metrics_from_ranks(rs)
        out.append({"label": _bucket_label(lo, hi), "lo": lo, "hi": hi, "n": m["n"], "mrr": m["mrr"]})
    return out
