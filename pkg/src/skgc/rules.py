"""Chain rules induced from reasoning paths, with pseudo-likelihood weight updates."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .kg import KnowledgeGraph


class EmptyRule(ValueError):
    """The path collapses to nothing once loops are removed."""


def elide_loops(entities: Sequence[int], relations: Sequence[int]):
    """Drop every segment that returns to an already visited entity.

    ``entities`` has one more element than ``relations``. Scanning left to
    right, a revisit of entity ``e`` truncates the kept walk back to the
    first occurrence of ``e``. Returns the loop-free ``(entities, relations)``.
    """
    if len(entities) != len(relations) + 1:
        raise ValueError("need len(entities) == len(relations) + 1")
    ents = [entities[0]]
    rels: list = []
    pos = {entities[0]: 0}
    for r, e in zip(relations, entities[1:]):
        if e in pos:
            k = pos[e]
            for dropped in ents[k + 1:]:
                del pos[dropped]
            ents = ents[:k + 1]
            rels = rels[:k]
        else:
            pos[e] = len(ents)
            ents.append(e)
            rels.append(r)
    return ents, rels


def induce_rule(path) -> tuple[tuple, int]:
    """Canonical ``(body, head)`` of a ReasoningPath; STOP steps are ignored."""
    ents, rels = elide_loops(path.entities, path.relations)
    if not rels:
        raise EmptyRule(f"path from {path.source} collapses to an empty body")
    return tuple(rels), path.query_rel


@dataclass
class Rule:
    body: tuple
    head: int
    weight: float = 0.5
    update_count: int = 0

    @property
    def key(self):
        return (self.body, self.head)


class RuleStore:
    """Insertion-ordered map from ``(body, head)`` to Rule."""

    def __init__(self, init_weight: float = 0.5):
        self.init_weight = init_weight
        self._rules: dict = {}

    def __len__(self):
        return len(self._rules)

    def __iter__(self):
        return iter(self._rules.values())

    def __contains__(self, key):
        return key in self._rules

    def get(self, key):
        return self._rules.get(key)

    def get_or_insert(self, key, init_weight: float | None = None) -> Rule:
        rule = self._rules.get(key)
        if rule is None:
            w = self.init_weight if init_weight is None else init_weight
            rule = Rule(tuple(key[0]), int(key[1]), float(np.clip(w, 0.0, 1.0)))
            self._rules[rule.key] = rule
        return rule

    def weights(self) -> dict:
        return {k: r.weight for k, r in self._rules.items()}

    def to_tsv(self, graph: KnowledgeGraph) -> str:
        lines = []
        for r in self._rules.values():
            body = ",".join(graph.relation_name(x) for x in r.body)
            lines.append(f"{body}\t{graph.relation_name(r.head)}\t{r.weight:.6f}\t{r.update_count}")
        return "\n".join(lines) + ("\n" if lines else "")

    def to_json(self) -> list:
        return [{"body": list(r.body), "head": r.head, "weight": r.weight,
                 "update_count": r.update_count} for r in self._rules.values()]

    @classmethod
    def from_json(cls, items: Iterable[dict], init_weight: float = 0.5) -> "RuleStore":
        store = cls(init_weight)
        for it in items:
            rule = store.get_or_insert((tuple(it["body"]), it["head"]), it["weight"])
            rule.update_count = int(it.get("update_count", 0))
        return store


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def path_likelihood(rule: Rule, prior_weight: float) -> float:
    """Probability that the path's conclusion holds: sigmoid(w_l * prior)."""
    return _sigmoid(rule.weight * prior_weight)


def unnormalized_joint(rule: Rule, prior_weight: float) -> float:
    return math.exp(rule.weight * prior_weight)


def m_step_update(rule: Rule, prior_weight: float, p_target: float, lr: float) -> Rule:
    """Move the rule weight along ``p_target - sigmoid(w * prior)``, clamped to [0, 1]."""
    grad = p_target - path_likelihood(rule, prior_weight)
    rule.weight = min(1.0, max(0.0, rule.weight + lr * grad))
    rule.update_count += 1
    return rule


def m_step_batch(store: RuleStore, items: Sequence[tuple], lr: float) -> int:
    """Batch M-step over ``(rule_key, prior_weight, p_target)`` items.

    Per-rule gradients are averaged over the batch and applied once per
    rule in canonical key order. Returns the number of rules updated.
    """
    acc: dict = {}
    for key, prior, target in items:
        rule = store.get(key)
        if rule is None:
            raise KeyError(f"rule {key} not in store")
        acc.setdefault(key, []).append(target - path_likelihood(rule, prior))
    for key in sorted(acc):
        rule = store.get(key)
        rule.weight = min(1.0, max(0.0, rule.weight + lr * float(np.mean(acc[key]))))
        rule.update_count += 1
    return len(acc)


def empirical_confidence(graph: KnowledgeGraph, body: Sequence[int], head: int,
                         rng: np.random.Generator, n_samples: int = 200) -> float:
    """Sampled fraction of body groundings whose head triple is in the graph.

    Each sample starts from a random edge labelled ``body[0]`` and follows
    the body by uniformly chosen edges. Returns 0.5 when no grounding is found.
    """
    first = np.flatnonzero(graph.edges[:, 1] == body[0])
    if len(first) == 0:
        return 0.5
    hits = total = 0
    for _ in range(n_samples):
        h, _, cur = graph.edges[first[rng.integers(len(first))]]
        ok = True
        for r in body[1:]:
            out = graph.out_edges(int(cur))
            nxt = out[out[:, 0] == r, 1] if len(out) else out
            if len(nxt) == 0:
                ok = False
                break
            cur = nxt[rng.integers(len(nxt))]
        if ok:
            total += 1
            hits += graph.has_edge(int(h), int(head), int(cur))
    return hits / total if total else 0.5
