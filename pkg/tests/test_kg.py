import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skgc.kg import CoverageError, KnowledgeGraph, TripleFormatError, build_graph

from conftest import random_graph


def scan_neighbors(g, e):
    """Linear scan of the original triples, both directions."""
    out = []
    for h, r, t in g.triples.tolist():
        if h == e:
            out.append((r, t))
        if t == e:
            out.append((r + g.n_relations, h))
    return sorted(out)


def test_single_triple():
    g = build_graph([("A", "r1", "B")])
    assert (g.n_entities, g.n_relations, len(g.edges)) == (2, 1, 2)
    assert g.neighbors(1) == [(g.inverse(0), 0)]
    assert g.degree_stats()["avg_in_degree"] == 0.5


def test_dedup_is_idempotent():
    once = build_graph([("A", "r1", "B"), ("B", "r2", "C")])
    twice = build_graph([("A", "r1", "B"), ("A", "r1", "B"), ("B", "r2", "C")])
    assert once.entities == twice.entities
    assert np.array_equal(once.edges, twice.edges)


def test_first_seen_ids():
    g = build_graph([("X", "p", "Y"), ("Z", "q", "X")])
    assert g.entities == ["X", "Y", "Z"]
    assert g.relations == ["p", "q"]


def test_errors():
    with pytest.raises(ValueError):
        build_graph([])
    with pytest.raises(TripleFormatError) as exc:
        build_graph([("A", "r", "B"), ("A", "", "B")])
    assert exc.value.line_no == 2
    g = build_graph([("A", "r", "B")])
    with pytest.raises(IndexError):
        g.neighbors(5)
    with pytest.raises(CoverageError) as exc:
        g.encode([("A", "r", "Q")])
    assert exc.value.entities == ["Q"]


def test_isolated_entity():
    g = KnowledgeGraph(["A", "B", "C"], ["r"], np.array([[0, 0, 1]]))
    assert g.neighbors(2) == []


def test_neighbors_match_scan(toy_graph):
    for e in range(toy_graph.n_entities):
        assert toy_graph.neighbors(e) == scan_neighbors(toy_graph, e)


def test_inverse_involution():
    g = build_graph([("A", "r1", "B"), ("B", "r2", "A")])
    for r in range(g.n_aug_relations):
        assert g.inverse(g.inverse(r)) == r
    assert g.inverse(0) == 2


def test_star_degree():
    g = build_graph([(x, "r", "hub") for x in "abcd"])
    stats = g.degree_stats()
    assert stats["avg_in_degree"] == pytest.approx(0.8)
    assert stats["per_entity"]["hub"] == 4


def test_self_loop_kept():
    g = build_graph([("A", "r", "A")])
    assert len(g.edges) == 2
    assert g.neighbors(0) == [(0, 0), (1, 0)]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_adjacency_properties(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 8, 3, 15)
    assert len(g.edges) == 2 * len(g.triples)
    for h, r, t in g.edges.tolist():
        assert g.has_edge(t, g.inverse(r), h)
    for e in range(g.n_entities):
        nb = g.neighbors(e)
        assert nb == scan_neighbors(g, e)
        assert len(nb) == g.offsets[e + 1] - g.offsets[e]


def test_deterministic_build():
    trip = [("a", "x", "b"), ("c", "y", "a"), ("b", "x", "c")]
    g1, g2 = build_graph(trip), build_graph(list(trip))
    assert g1.entities == g2.entities and np.array_equal(g1.edges, g2.edges)
