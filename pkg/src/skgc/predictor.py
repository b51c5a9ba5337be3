"""Graph-encoded trilinear link predictor with hand-written gradients.

One composition layer encodes the graph::

    h_v = tanh(mean_{(u, r) -> v} W_comp (e_u * rho_r) + W_self e_v)
    h_r = W_rel rho_r

and a query ``(s, r)`` scores every entity ``o`` with
``sigmoid(sum_k h_s[k] h_r[k] h_o[k])``. Three losses are supported: the
label BCE, the densification BCE over composite-relation virtual triples,
and the weighted distillation NLL with its entropy term. ``loss_and_grad``
returns exact gradients of their weighted sum for every parameter table.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .kg import KnowledgeGraph

PROB_EPS = 1e-7
ATTN_EPS = 1e-6
CHECKPOINT_VERSION = 1


class VirtualTriple(NamedTuple):
    source: int
    query_rel: int
    body: tuple
    target: int


class EStepTarget(NamedTuple):
    source: int
    relation: int
    gold: int
    weight: float


@dataclass
class PredictorParams:
    """Trainable tables. Matrices act on column vectors (``W x``)."""

    entity: np.ndarray
    relation: np.ndarray
    w_comp: np.ndarray
    w_self: np.ndarray
    w_rel: np.ndarray
    w_attn: np.ndarray  # (2d,): query half then body half

    @classmethod
    def init(cls, n_entities: int, n_relations: int, dim: int, rng: np.random.Generator):
        """Xavier-uniform initialisation. ``n_relations`` counts inverse relations."""
        def xavier(shape):
            bound = np.sqrt(6.0 / (shape[0] + shape[-1]))
            return rng.uniform(-bound, bound, size=shape)
        return cls(
            entity=xavier((n_entities, dim)),
            relation=xavier((n_relations, dim)),
            w_comp=xavier((dim, dim)),
            w_self=xavier((dim, dim)),
            w_rel=xavier((dim, dim)),
            w_attn=xavier((1, 2 * dim))[0],
        )

    @property
    def dim(self) -> int:
        return self.entity.shape[1]

    def names(self) -> list[str]:
        return [f.name for f in fields(self)]

    def items(self):
        return [(n, getattr(self, n)) for n in self.names()]

    def zeros_like(self) -> "PredictorParams":
        return PredictorParams(**{n: np.zeros_like(a) for n, a in self.items()})

    def copy(self) -> "PredictorParams":
        return PredictorParams(**{n: a.copy() for n, a in self.items()})

    def digest(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for _, a in self.items():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def bce_with_logits(S, Y):
    """Row-wise mean BCE between sigmoid(S) and targets Y, computed stably."""
    return np.mean(np.logaddexp(0.0, S) - Y * S, axis=-1)


def _normalised_neg_entropy(S):
    """For p = sigmoid(S) renormalised per row: (p~, log p~, sum p~ log p~)."""
    logp = -np.logaddexp(0.0, -S)
    logz = np.logaddexp.reduce(logp, axis=-1, keepdims=True)
    logpt = logp - logz
    pt = np.exp(logpt)
    return pt, logpt, np.sum(pt * logpt, axis=-1)


def leaky_relu(x, slope):
    return np.where(x > 0, x, slope * x)


@dataclass
class Encoding:
    ent: np.ndarray      # (N, d) encoded entities
    rel: np.ndarray      # (2R, d) encoded relations
    comp: np.ndarray = field(repr=False)  # (M, d) composed messages before W_comp


@dataclass
class LossBatch:
    """Inputs for one combined loss evaluation.

    ``label`` holds (source, relation, gold) rows; the combined objective is
    ``mean label BCE + beta * den + gamma * elbo``.
    """

    label: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.int64))
    virtual: Sequence[VirtualTriple] = ()
    elbo: Sequence[EStepTarget] = ()
    beta: float = 0.0
    gamma: float = 0.0
    lam: float = 0.0


class Predictor:
    def __init__(self, graph: KnowledgeGraph, params: PredictorParams,
                 composition: str = "mult", label_smoothing: float = 0.1,
                 attn_slope: float = 0.01):
        if composition not in ("mult", "sub"):
            raise ValueError(f"unknown composition {composition!r}")
        if params.entity.shape[0] != graph.n_entities or params.relation.shape[0] != graph.n_aug_relations:
            raise ValueError("parameter tables do not match graph size")
        d = params.dim
        for name, shape in (("w_comp", (d, d)), ("w_self", (d, d)), ("w_rel", (d, d)), ("w_attn", (2 * d,))):
            if getattr(params, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(params, name).shape}, expected {shape}")
        self.graph = graph
        self.params = params
        self.composition = composition
        self.label_smoothing = label_smoothing
        self.attn_slope = attn_slope

        N, M = graph.n_entities, len(graph.edges)
        src, rel, dst = graph.edges[:, 0], graph.edges[:, 1], graph.edges[:, 2]
        ones = np.ones(M)
        self._src = sp.csr_matrix((ones, (np.arange(M), src)), shape=(M, N))
        self._rel = sp.csr_matrix((ones, (np.arange(M), rel)), shape=(M, graph.n_aug_relations))
        indeg = np.bincount(dst, minlength=N).astype(float)
        self._agg = sp.csr_matrix((1.0 / indeg[dst], (dst, np.arange(M))), shape=(N, M))

    @property
    def n_entities(self):
        return self.graph.n_entities

    # -- forward -----------------------------------------------------------

    def encode(self) -> Encoding:
        p = self.params
        e_src = self._src @ p.entity
        r_edge = self._rel @ p.relation
        comp = e_src * r_edge if self.composition == "mult" else e_src - r_edge
        pre = self._agg @ (comp @ p.w_comp.T) + p.entity @ p.w_self.T
        return Encoding(ent=np.tanh(pre), rel=p.relation @ p.w_rel.T, comp=comp)

    def _check_entity(self, e):
        if not 0 <= e < self.n_entities:
            raise IndexError(f"entity id {e} out of range")

    def _check_relation(self, r):
        if not 0 <= r < self.graph.n_aug_relations:
            raise IndexError(f"relation id {r} out of range")

    def forward_with_relation_embedding(self, source: int, h_rel: np.ndarray, enc: Encoding | None = None):
        self._check_entity(source)
        enc = enc or self.encode()
        return expit(enc.ent @ (enc.ent[source] * h_rel))

    def forward(self, source: int, relation: int, enc: Encoding | None = None) -> np.ndarray:
        """Per-entity probabilities for the query ``(source, relation, ?)``."""
        self._check_relation(relation)
        enc = enc or self.encode()
        return self.forward_with_relation_embedding(source, enc.rel[relation], enc)

    def score_queries(self, sources, relations, enc: Encoding | None = None) -> np.ndarray:
        """Raw trilinear scores, shape (len(sources), |E|)."""
        enc = enc or self.encode()
        sources = np.asarray(sources)
        relations = np.asarray(relations)
        return (enc.ent[sources] * enc.rel[relations]) @ enc.ent.T

    def _attention(self, query_rel, body, enc):
        if len(body) == 0:
            raise ValueError("composite relation needs a non-empty body")
        d = self.params.dim
        wa = self.params.w_attn
        hq = enc.rel[query_rel]
        hb = enc.rel[list(body)]
        x = wa[:d] @ hq + hb @ wa[d:]
        a = leaky_relu(x, self.attn_slope)
        shift = a.min() <= 0
        num = a - a.min() + ATTN_EPS if shift else a
        alpha = num / num.sum()
        return alpha, alpha @ hb, (x, shift, int(np.argmin(a)), num.sum(), alpha, hq, hb)

    def attention_weights(self, query_rel: int, body, enc: Encoding | None = None) -> np.ndarray:
        return self._attention(query_rel, body, enc or self.encode())[0]

    def composite_relation_embedding(self, query_rel: int, body, enc: Encoding | None = None) -> np.ndarray:
        """Attention-weighted sum of encoded body relations, steered by the query relation."""
        return self._attention(query_rel, body, enc or self.encode())[1]

    # -- losses ------------------------------------------------------------

    def targets(self, gold: int) -> np.ndarray:
        N = self.n_entities
        y = np.full(N, self.label_smoothing / N)
        y[gold] += 1.0 - self.label_smoothing
        return y

    def label_loss(self, probs: np.ndarray, gold: int) -> float:
        y = self.targets(gold)
        pc = np.clip(probs, PROB_EPS, 1 - PROB_EPS)
        return float(-np.mean(y * np.log(pc) + (1 - y) * np.log1p(-pc)))

    def den_loss(self, virtual: Sequence[VirtualTriple], enc: Encoding | None = None) -> float:
        if not virtual:
            return 0.0
        enc = enc or self.encode()
        total = 0.0
        for v in virtual:
            self._check_entity(v.source)
            h = self.composite_relation_embedding(v.query_rel, v.body, enc)
            s = enc.ent @ (enc.ent[v.source] * h)
            total += float(bce_with_logits(s[None], self.targets(v.target)[None])[0])
        return total / len(virtual)

    def elbo_loss(self, targets: Sequence[EStepTarget], lam: float, enc: Encoding | None = None) -> float:
        enc = enc or self.encode()
        total = 0.0
        for t in targets:
            if t.weight < 0:
                raise ValueError("negative E-step weight")
            s = self.score_queries([t.source], [t.relation], enc)
            _, _, neg_ent = _normalised_neg_entropy(s)
            total += t.weight * np.logaddexp(0.0, -s[0, t.gold]) + lam * neg_ent[0]
        return float(total)

    # -- combined loss + exact gradient -----------------------------------

    def loss_and_grad(self, batch: LossBatch):
        """Return ``(total, parts, grads)`` for the combined objective.

        ``parts`` maps ``label``/``den``/``elbo`` to the unweighted losses.
        Blocks for a zero loss weight are skipped entirely.
        """
        p = self.params
        enc = self.encode()
        N, d = self.n_entities, p.dim
        label = np.asarray(batch.label, dtype=np.int64).reshape(-1, 3)
        virtual = list(batch.virtual) if batch.beta != 0 else []
        elbo = list(batch.elbo) if batch.gamma != 0 else []
        for t in elbo:
            if t.weight < 0:
                raise ValueError("negative E-step weight")

        n_lab, n_den, n_elb = len(label), len(virtual), len(elbo)
        subj = np.concatenate([label[:, 0],
                               np.array([v.source for v in virtual], np.int64),
                               np.array([t.source for t in elbo], np.int64)])
        rel_rows = np.concatenate([label[:, 1], np.array([t.relation for t in elbo], np.int64)])
        for e in subj:
            self._check_entity(int(e))
        for r in rel_rows:
            self._check_relation(int(r))

        attn_cache = []
        rv = np.zeros((len(subj), d))
        rv[:n_lab] = enc.rel[label[:, 1]]
        for i, v in enumerate(virtual):
            self._check_entity(v.target)
            alpha, out, cache = self._attention(v.query_rel, v.body, enc)
            rv[n_lab + i] = out
            attn_cache.append(cache)
        if n_elb:
            rv[n_lab + n_den:] = enc.rel[[t.relation for t in elbo]]

        X = enc.ent[subj] * rv
        S = X @ enc.ent.T
        P = expit(S)
        dS = np.zeros_like(S)
        parts = {"label": 0.0, "den": 0.0, "elbo": 0.0}

        def bce_rows(lo, hi, golds, scale):
            Y = np.full((hi - lo, N), self.label_smoothing / N)
            Y[np.arange(hi - lo), golds] += 1.0 - self.label_smoothing
            dS[lo:hi] += scale * (P[lo:hi] - Y) / N
            return bce_with_logits(S[lo:hi], Y)

        if n_lab:
            parts["label"] = float(bce_rows(0, n_lab, label[:, 2], 1.0 / n_lab).mean())
        if n_den:
            golds = np.array([v.target for v in virtual], np.int64)
            parts["den"] = float(bce_rows(n_lab, n_lab + n_den, golds, batch.beta / n_den).mean())
        if n_elb:
            lo = n_lab + n_den
            w = np.array([t.weight for t in elbo])
            golds = np.array([t.gold for t in elbo], np.int64)
            rows = np.arange(lo, lo + n_elb)
            pt, logpt, neg_ent = _normalised_neg_entropy(S[lo:])
            nll = np.logaddexp(0.0, -S[rows, golds])  # -log sigmoid
            parts["elbo"] = float(np.sum(w * nll) + batch.lam * np.sum(neg_ent))
            # d(neg_ent)/dS = (log pt - neg_ent) * pt * (1 - p)
            dS[lo:] += batch.gamma * batch.lam * (logpt - neg_ent[:, None]) * pt * (1 - P[lo:])
            dS[rows, golds] += batch.gamma * (-w * (1 - P[rows, golds]))

        total = parts["label"] + batch.beta * parts["den"] + batch.gamma * parts["elbo"]

        g = p.zeros_like()
        dX = dS @ enc.ent
        dH = dS.T @ X
        np.add.at(dH, subj, dX * rv)
        dRV = dX * enc.ent[subj]

        dHR = np.zeros_like(enc.rel)
        np.add.at(dHR, label[:, 1], dRV[:n_lab])
        if n_elb:
            np.add.at(dHR, rel_rows[n_lab:], dRV[n_lab + n_den:])
        for i, v in enumerate(virtual):
            self._attention_backward(dRV[n_lab + i], v, attn_cache[i], dHR, g.w_attn)

        g.w_rel += dHR.T @ p.relation
        g.relation += dHR @ p.w_rel

        dpre = dH * (1 - enc.ent ** 2)
        g.w_self += dpre.T @ p.entity
        g.entity += dpre @ p.w_self
        dmsg = self._agg.T @ dpre
        g.w_comp += dmsg.T @ enc.comp
        dcomp = dmsg @ p.w_comp
        if self.composition == "mult":
            e_src = self._src @ p.entity
            r_edge = self._rel @ p.relation
            g.entity += self._src.T @ (dcomp * r_edge)
            g.relation += self._rel.T @ (dcomp * e_src)
        else:
            g.entity += self._src.T @ dcomp
            g.relation -= self._rel.T @ dcomp

        for name, arr in g.items():
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"non-finite gradient in parameter block {name!r}")
        return float(total), parts, g

    def _attention_backward(self, dout, v, cache, dHR, dwa):
        x, shift, argmin, z, alpha, hq, hb = cache
        d = self.params.dim
        wa = self.params.w_attn
        dalpha = hb @ dout
        dhb = np.outer(alpha, dout)
        dnum = (dalpha - alpha @ dalpha) / z
        da = dnum.copy()
        if shift:
            da[argmin] -= dnum.sum()
        dx = da * np.where(x > 0, 1.0, self.attn_slope)
        dwa[:d] += dx.sum() * hq
        dwa[d:] += dx @ hb
        dHR[v.query_rel] += dx.sum() * wa[:d]
        dhb += np.outer(dx, wa[d:])
        np.add.at(dHR, list(v.body), dhb)


# -- optimisation ---------------------------------------------------------

def sgd_step(params: PredictorParams, grads: PredictorParams, lr: float) -> PredictorParams:
    """Plain SGD, in place."""
    for name, arr in params.items():
        upd = lr * getattr(grads, name)
        if not np.all(np.isfinite(upd)):
            raise FloatingPointError(f"non-finite update for {name!r}")
        arr -= upd
    return params


class Optimizer:
    """First-order update rule applied in place to a params dataclass.

    ``kind`` is ``"sgd"`` (default), ``"momentum"`` or ``"adam"``.
    """

    def __init__(self, kind: str = "sgd", lr: float = 0.005, momentum: float = 0.9,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        if kind not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind, self.lr, self.momentum = kind, lr, momentum
        self.betas, self.eps = betas, eps
        self.state: dict = {}
        self.t = 0

    def step(self, params, grads):
        if self.kind == "sgd":
            return sgd_step(params, grads, self.lr)
        self.t += 1
        for name, arr in params.items():
            g = getattr(grads, name)
            if self.kind == "momentum":
                buf = self.state.setdefault(name, np.zeros_like(arr))
                buf *= self.momentum
                buf += g
                upd = self.lr * buf
            else:
                m, v = self.state.setdefault(name, (np.zeros_like(arr), np.zeros_like(arr)))
                b1, b2 = self.betas
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                mhat = m / (1 - b1 ** self.t)
                vhat = v / (1 - b2 ** self.t)
                upd = self.lr * mhat / (np.sqrt(vhat) + self.eps)
            if not np.all(np.isfinite(upd)):
                raise FloatingPointError(f"non-finite update for {name!r}")
            arr -= upd
        return params


# -- checkpoints ----------------------------------------------------------

def save_checkpoint(path, params, composition: str = "mult", seed: int = 0, **extra) -> None:
    """Write params plus metadata to a ``.npz`` file (bit-exact round trip)."""
    import json
    meta = {"version": CHECKPOINT_VERSION, "composition": composition, "seed": seed,
            "kind": type(params).__name__, **extra}
    arrays = {f"param_{n}": a for n, a in params.items()}
    with open(path, "wb") as f:
        np.savez(f, meta=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path, cls=PredictorParams):
    import json
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        arrays = {k[len("param_"):]: z[k] for k in z.files if k.startswith("param_")}
    return cls(**arrays), meta
