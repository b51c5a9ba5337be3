"""In-memory knowledge graph with inverse-relation augmentation."""
from __future__ import annotations

import logging
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class TripleFormatError(ValueError):
    """Raised for a malformed triple; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class CoverageError(ValueError):
    """Raised when triples mention entities or relations outside the vocabulary."""

    def __init__(self, message: str, entities=(), relations=()):
        super().__init__(message)
        self.entities = list(entities)
        self.relations = list(relations)


class KnowledgeGraph:
    """Triple store over dense integer ids.

    Relation ids ``[0, R)`` are the original relations, ``[R, 2R)`` their
    inverses. Every original triple ``(h, r, t)`` is indexed twice in the
    adjacency: once as is and once as ``(t, r + R, h)``.

    The graph is immutable after construction.
    """

    def __init__(self, entities: Sequence[str], relations: Sequence[str], triples: np.ndarray):
        self.entities = list(entities)
        self.relations = list(relations)
        self.entity_index = {e: i for i, e in enumerate(self.entities)}
        self.relation_index = {r: i for i, r in enumerate(self.relations)}

        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        n_ent, n_rel = len(self.entities), len(self.relations)
        if len(triples):
            if triples[:, [0, 2]].min() < 0 or triples[:, [0, 2]].max() >= n_ent:
                raise ValueError("entity id out of range")
            if triples[:, 1].min() < 0 or triples[:, 1].max() >= n_rel:
                raise ValueError("relation id out of range")
        self.triples = triples
        self.triples.setflags(write=False)

        inv = np.stack([triples[:, 2], triples[:, 1] + n_rel, triples[:, 0]], axis=1)
        edges = np.concatenate([triples, inv]) if len(triples) else np.zeros((0, 3), np.int64)
        order = np.lexsort((edges[:, 2], edges[:, 1], edges[:, 0]))
        self.edges = edges[order]
        self.edges.setflags(write=False)
        # CSR offsets into self.edges by head entity
        counts = np.bincount(self.edges[:, 0], minlength=n_ent)
        self.offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.in_degree = np.bincount(triples[:, 2], minlength=n_ent).astype(np.int64)
        self._edge_set = {tuple(e) for e in self.edges.tolist()}

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        """Number of original (non-inverse) relations."""
        return len(self.relations)

    @property
    def n_aug_relations(self) -> int:
        return 2 * len(self.relations)

    def inverse(self, r: int) -> int:
        R = self.n_relations
        if not 0 <= r < 2 * R:
            raise ValueError(f"relation id {r} out of range")
        return r + R if r < R else r - R

    def relation_name(self, r: int) -> str:
        R = self.n_relations
        if r < R:
            return self.relations[r]
        if r < 2 * R:
            return self.relations[r - R] + "_inv"
        return "STOP"

    def neighbors(self, e: int) -> list[tuple[int, int]]:
        """Outgoing augmented edges of ``e`` as ``(relation, tail)``, sorted."""
        if not 0 <= e < self.n_entities:
            raise IndexError(f"entity id {e} out of range")
        block = self.edges[self.offsets[e]:self.offsets[e + 1]]
        return [(int(r), int(t)) for _, r, t in block]

    def out_edges(self, e: int) -> np.ndarray:
        """Array view of ``neighbors(e)``: shape (k, 2) of (relation, tail)."""
        return self.edges[self.offsets[e]:self.offsets[e + 1], 1:]

    def has_edge(self, h: int, r: int, t: int) -> bool:
        return (h, r, t) in self._edge_set

    def degree_stats(self) -> dict:
        n = self.n_entities
        return {
            "avg_in_degree": len(self.triples) / n if n else 0.0,
            "per_entity": {self.entities[i]: int(c) for i, c in enumerate(self.in_degree)},
        }

    def encode(self, triples: Iterable[Sequence[str]]) -> np.ndarray:
        """Map string triples to ids; raise CoverageError on unknown names."""
        out, bad_e, bad_r = [], [], []
        for h, r, t in triples:
            for name in (h, t):
                if name not in self.entity_index and name not in bad_e:
                    bad_e.append(name)
            if r not in self.relation_index and r not in bad_r:
                bad_r.append(r)
            if not bad_e and not bad_r:
                out.append((self.entity_index[h], self.relation_index[r], self.entity_index[t]))
        if bad_e or bad_r:
            raise CoverageError(
                f"unknown entities {bad_e[:10]} / relations {bad_r[:10]} "
                f"({len(bad_e)} entities, {len(bad_r)} relations absent from training vocabulary)",
                bad_e, bad_r)
        return np.asarray(out, dtype=np.int64).reshape(-1, 3)

    def __repr__(self):
        return (f"KnowledgeGraph(|E|={self.n_entities}, |R|={self.n_relations}, "
                f"triples={len(self.triples)})")


def build_graph(triples: Sequence[Sequence[str]]) -> KnowledgeGraph:
    """Build a graph from string triples, interning names in first-seen order.

    Duplicate triples are dropped (the count is logged). Each item must have
    three non-empty fields; the position (1-based) is reported otherwise.
    """
    if len(triples) == 0:
        raise ValueError("empty triple list")
    ent: dict[str, int] = {}
    rel: dict[str, int] = {}
    ids = []
    seen = set()
    dropped = 0
    for i, item in enumerate(triples, start=1):
        if len(item) != 3 or any(not isinstance(x, str) or not x for x in item):
            raise TripleFormatError(i, f"expected three non-empty fields, got {item!r}")
        h, r, t = item
        for name in (h, t):
            if name not in ent:
                ent[name] = len(ent)
        if r not in rel:
            rel[r] = len(rel)
        key = (ent[h], rel[r], ent[t])
        if key in seen:
            dropped += 1
            continue
        seen.add(key)
        ids.append(key)
    if dropped:
        logger.info("dropped %d duplicate triples", dropped)
    return KnowledgeGraph(list(ent), list(rel), np.asarray(ids, dtype=np.int64))
