"""Policy-guided reasoning-path search over the augmented graph.

The policy scores each outgoing edge ``(r, e')`` of the current entity from
``[emb(e_t); emb(r_q); emb(r); emb(e')]`` through a one-hidden-layer MLP and
normalises with a softmax. A STOP action (self-loop under the reserved
relation id ``2|R|``) is always available. The state is Markov in
``(e_t, r_q)``; no path-history encoder is used.
"""
from __future__ import annotations

import enum
import heapq
from dataclasses import dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from .kg import KnowledgeGraph


class Polarity(enum.Enum):
    POSITIVE = "+"
    NEGATIVE = "-"


@dataclass
class ReasoningPath:
    """A walk from ``source`` answering ``(source, query_rel, ?)``.

    ``steps`` may end with the STOP self-loop; ``step_probs`` holds the
    policy probability of each recorded step, STOP included.
    """

    source: int
    query_rel: int
    steps: list = field(default_factory=list)
    step_probs: list = field(default_factory=list)
    stop_rel: int = -1
    polarity: Polarity | None = None

    @property
    def prior_weight(self) -> float:
        return float(np.exp(np.sum(np.log(self.step_probs)))) if self.step_probs else 1.0

    @property
    def terminal(self) -> int:
        return self.steps[-1][1] if self.steps else self.source

    @property
    def relation_steps(self) -> list:
        """Steps with the STOP self-loop removed."""
        return [(r, e) for r, e in self.steps if r != self.stop_rel]

    @property
    def entities(self) -> list:
        return [self.source] + [e for _, e in self.relation_steps]

    @property
    def relations(self) -> list:
        return [r for r, _ in self.relation_steps]

    def key(self):
        return (self.source, self.query_rel, tuple(self.steps))

    def format(self, graph: KnowledgeGraph) -> str:
        parts = [graph.entities[self.source]]
        for r, e in self.relation_steps:
            parts.append(f"-[{graph.relation_name(r)}]-> {graph.entities[e]}")
        pol = self.polarity.value if self.polarity else "?"
        return f"{' '.join(parts)} | prior={self.prior_weight:.6g} | polarity={pol}"


def classify(path: ReasoningPath, gold: int) -> Polarity:
    return Polarity.POSITIVE if path.terminal == gold else Polarity.NEGATIVE


def validate_path(graph: KnowledgeGraph, path: ReasoningPath) -> bool:
    cur = path.source
    for r, e in path.steps:
        if r == path.stop_rel:
            if e != cur:
                return False
            continue
        if not graph.has_edge(cur, r, e):
            return False
        cur = e
    return True


@dataclass
class PolicyParams:
    entity: np.ndarray    # (N, d)
    relation: np.ndarray  # (2R + 1, d); last row is STOP
    w1: np.ndarray        # (hidden, 4d)
    b1: np.ndarray        # (hidden,)
    v: np.ndarray         # (hidden,)

    @classmethod
    def init(cls, n_entities, n_aug_relations, dim, hidden, rng):
        def xavier(shape):
            bound = np.sqrt(6.0 / (shape[0] + shape[-1]))
            return rng.uniform(-bound, bound, size=shape)
        return cls(
            entity=xavier((n_entities, dim)),
            relation=xavier((n_aug_relations + 1, dim)),
            w1=xavier((hidden, 4 * dim)),
            b1=np.zeros(hidden),
            v=xavier((1, hidden))[0],
        )

    def names(self):
        return [f.name for f in fields(self)]

    def items(self):
        return [(n, getattr(self, n)) for n in self.names()]

    def zeros_like(self):
        return PolicyParams(**{n: np.zeros_like(a) for n, a in self.items()})

    def copy(self):
        return PolicyParams(**{n: a.copy() for n, a in self.items()})


@dataclass
class _Actions:
    rels: np.ndarray
    ents: np.ndarray
    x: np.ndarray       # (A, 4d) input features
    hid: np.ndarray     # (A, hidden) tanh activations
    logits: np.ndarray
    probs: np.ndarray


class PathMiner:
    """Policy network plus rollout / beam search / REINFORCE on a fixed graph."""

    def __init__(self, graph: KnowledgeGraph, params: PolicyParams, max_steps: int = 3,
                 action_cap: int = 256, baseline_decay: float = 0.9):
        if max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        self.graph = graph
        self.params = params
        self.max_steps = max_steps
        self.action_cap = action_cap
        self.stop_rel = graph.n_aug_relations
        self.baseline = 0.0
        self.baseline_decay = baseline_decay

    def _actions(self, query_rel: int, cur: int, exclude: frozenset = frozenset()) -> _Actions:
        p = self.params
        edges = self.graph.out_edges(cur)
        if exclude and len(edges):
            keep = [i for i, (r, t) in enumerate(edges.tolist()) if (cur, r, t) not in exclude]
            edges = edges[keep]
        rels = np.append(edges[:, 0], self.stop_rel).astype(np.int64)
        ents = np.append(edges[:, 1], cur).astype(np.int64)
        n = len(rels)
        x = np.concatenate([
            np.broadcast_to(p.entity[cur], (n, p.entity.shape[1])),
            np.broadcast_to(p.relation[query_rel], (n, p.relation.shape[1])),
            p.relation[rels],
            p.entity[ents],
        ], axis=1)
        hid = np.tanh(x @ p.w1.T + p.b1)
        logits = hid @ p.v
        if n - 1 > self.action_cap:
            # keep STOP plus the top-K edges by logit
            top = np.argsort(-logits[:-1], kind="stable")[:self.action_cap]
            sel = np.append(np.sort(top), n - 1)
            rels, ents, x, hid, logits = rels[sel], ents[sel], x[sel], hid[sel], logits[sel]
        probs = np.exp(logits - logsumexp(logits))
        return _Actions(rels, ents, x, hid, logits, probs)

    def action_distribution(self, query_rel: int, cur: int, exclude: Iterable = ()):
        """Return ``(actions, probs)``; actions are ``(relation, entity)`` pairs."""
        a = self._actions(query_rel, cur, frozenset(exclude))
        return list(zip(a.rels.tolist(), a.ents.tolist())), a.probs

    def rollout(self, source: int, query_rel: int, rng: np.random.Generator,
                exclude: Iterable = ()) -> ReasoningPath:
        exclude = frozenset(exclude)
        path = ReasoningPath(source, query_rel, stop_rel=self.stop_rel)
        cur = source
        for _ in range(self.max_steps):
            a = self._actions(query_rel, cur, exclude)
            i = int(rng.choice(len(a.probs), p=a.probs))
            path.steps.append((int(a.rels[i]), int(a.ents[i])))
            path.step_probs.append(float(a.probs[i]))
            if a.rels[i] == self.stop_rel:
                break
            cur = int(a.ents[i])
        return path

    def beam_search(self, source: int, query_rel: int, width: int = 4,
                    exclude: Iterable = ()) -> list[ReasoningPath]:
        """Layer-wise beam over cumulative log-probability.

        Finished paths (STOP taken or step limit reached) compete with live
        ones for the ``width`` slots at every depth. Results are sorted by
        prior weight, descending.
        """
        if width < 1:
            raise ValueError("beam width must be >= 1")
        exclude = frozenset(exclude)
        live = [(0.0, [], [])]   # (logp, steps, probs)
        done: list = []
        for depth in range(self.max_steps):
            cand = []
            for logp, steps, probs in live:
                cur = steps[-1][1] if steps else source
                a = self._actions(query_rel, cur, exclude)
                for r, e, pr in zip(a.rels.tolist(), a.ents.tolist(), a.probs.tolist()):
                    if pr <= 0.0:
                        continue
                    finished = r == self.stop_rel or depth == self.max_steps - 1
                    cand.append((logp + np.log(pr), steps + [(r, e)], probs + [pr], finished))
            pool = [(lp, s, p, True) for lp, s, p in done] + cand
            best = heapq.nlargest(width, pool, key=lambda c: c[0])
            done = [(lp, s, p) for lp, s, p, fin in best if fin]
            live = [(lp, s, p) for lp, s, p, fin in best if not fin]
            if not live:
                break
        seen, out = set(), []
        for lp, steps, probs in sorted(done, key=lambda c: -c[0]):
            path = ReasoningPath(source, query_rel, steps, probs, stop_rel=self.stop_rel)
            if path.key() not in seen:
                seen.add(path.key())
                out.append(path)
        return out

    def enumerate_paths(self, source: int, query_rel: int, exclude: Iterable = ()) -> list[ReasoningPath]:
        """Every terminal trajectory with its probability (exhaustive; small graphs only)."""
        exclude = frozenset(exclude)
        out = []

        def rec(steps, probs):
            cur = steps[-1][1] if steps else source
            a = self._actions(query_rel, cur, exclude)
            for r, e, pr in zip(a.rels.tolist(), a.ents.tolist(), a.probs.tolist()):
                s, p = steps + [(r, e)], probs + [pr]
                if r == self.stop_rel or len(s) == self.max_steps:
                    out.append(ReasoningPath(source, query_rel, s, p, stop_rel=self.stop_rel))
                else:
                    rec(s, p)

        rec([], [])
        return out

    # -- gradients ---------------------------------------------------------

    def _accumulate(self, grads: PolicyParams, a: _Actions, dlogits: np.ndarray,
                    cur: int, query_rel: int) -> None:
        p = self.params
        d = p.entity.shape[1]
        grads.v += dlogits @ a.hid
        dpre = np.outer(dlogits, p.v) * (1 - a.hid ** 2)
        grads.w1 += dpre.T @ a.x
        grads.b1 += dpre.sum(axis=0)
        dx = dpre @ p.w1
        grads.entity[cur] += dx[:, :d].sum(axis=0)
        grads.relation[query_rel] += dx[:, d:2 * d].sum(axis=0)
        np.add.at(grads.relation, a.rels, dx[:, 2 * d:3 * d])
        np.add.at(grads.entity, a.ents, dx[:, 3 * d:])

    def path_log_prob_grad(self, path: ReasoningPath, coef: float = 1.0,
                           entropy_coef: float = 0.0, exclude: Iterable = (),
                           grads: PolicyParams | None = None) -> PolicyParams:
        """Gradient of ``coef * log pi(path) + entropy_coef * sum_t H_t`` w.r.t. theta."""
        exclude = frozenset(exclude)
        grads = grads if grads is not None else self.params.zeros_like()
        cur = path.source
        for r, e in path.steps:
            a = self._actions(path.query_rel, cur, exclude)
            idx = np.flatnonzero((a.rels == r) & (a.ents == e))
            if len(idx) == 0:
                raise ValueError(f"step {(r, e)} not an available action at entity {cur}")
            dl = -coef * a.probs
            dl[idx[0]] += coef
            if entropy_coef:
                logp = np.log(np.maximum(a.probs, 1e-300))
                ent = -np.sum(a.probs * logp)
                dl += entropy_coef * (-a.probs * (logp + ent))
            self._accumulate(grads, a, dl, cur, path.query_rel)
            if r == self.stop_rel:
                break
            cur = e
        return grads

    def reinforce_update(self, batch: Sequence[tuple], rollouts_per_query: int, lr: float,
                         rng: np.random.Generator, entropy_coef: float = 0.0,
                         exclude_gold: bool = True, optimizer=None) -> dict:
        """One REINFORCE ascent step on expected terminal reward.

        ``batch`` holds ``(source, query_rel, gold)`` triples. Reward is 1 when
        the path ends at ``gold``. The baseline is an exponential moving
        average of batch-mean reward, updated after the step. With an
        ``optimizer`` (anything with ``step(params, grads)`` that descends),
        it is used on the negated gradient instead of the plain ``lr`` step.
        """
        if len(batch) == 0:
            raise ValueError("empty batch")
        grads = self.params.zeros_like()
        rewards = []
        n = len(batch) * rollouts_per_query
        for s, r, gold in batch:
            excl = self.gold_exclusion(s, r, gold) if exclude_gold else frozenset()
            for _ in range(rollouts_per_query):
                path = self.rollout(s, r, rng, excl)
                reward = 1.0 if path.terminal == gold else 0.0
                rewards.append(reward)
                adv = reward - self.baseline
                if adv != 0.0 or entropy_coef:
                    self.path_log_prob_grad(path, adv / n, entropy_coef / n, excl, grads)
        for name, arr in grads.items():
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"non-finite policy gradient in {name!r}")
        if optimizer is None:
            for name, arr in self.params.items():
                arr += lr * getattr(grads, name)
        else:
            for _, arr in grads.items():
                np.negative(arr, out=arr)
            optimizer.step(self.params, grads)
        mean_r = float(np.mean(rewards))
        self.baseline = self.baseline_decay * self.baseline + (1 - self.baseline_decay) * mean_r
        return {"mean_reward": mean_r, "baseline": self.baseline}

    def gold_exclusion(self, source: int, query_rel: int, gold: int) -> frozenset:
        """The query's own edge and its inverse, hidden from the policy."""
        inv = self.graph.inverse(query_rel)
        return frozenset({(source, query_rel, gold), (gold, inv, source)})
