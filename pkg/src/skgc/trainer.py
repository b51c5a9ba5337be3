"""Pretraining and the alternating E/M joint training loop."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
import zlib
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .evaluation import build_filter, evaluate
from .kg import KnowledgeGraph
from .policy import PathMiner, PolicyParams, Polarity, ReasoningPath, classify
from .predictor import (EStepTarget, LossBatch, Optimizer, Predictor, PredictorParams,
                        VirtualTriple)
from .rules import EmptyRule, RuleStore, induce_rule, m_step_batch

logger = logging.getLogger(__name__)

# config-file key -> dataclass field, where they differ
_KEY_ALIASES = {"lambda": "lam"}


@dataclass
class TrainConfig:
    beta: float = 1.0
    gamma: float = 1.0
    lam: float = 0.001
    lr: float = 0.005
    lr_rule: float = 0.5
    lr_policy: float = 0.05
    optimizer: str = "sgd"
    policy_optimizer: str = "sgd"
    batch_size: int = 128
    beam_width: int = 4
    max_steps: int = 3
    action_cap: int = 256
    rollouts_per_query: int = 4
    entropy_coef: float = 0.0
    epochs_pretrain_gnn: int = 50
    epochs_pretrain_rl: int = 10
    epochs_joint: int = 30
    patience: int = 5
    seed: int = 0
    composition_op: str = "mult"
    label_smoothing: float = 0.1
    dim: int = 32
    policy_dim: int = 16
    policy_hidden: int = 32
    rule_init_weight: float = 0.5
    policy_refresh: bool = False

    def __post_init__(self):
        if min(self.beta, self.gamma, self.lam) < 0:
            raise ValueError("beta, gamma and lambda must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.composition_op not in ("mult", "sub"):
            raise ValueError(f"composition_op must be 'mult' or 'sub', got {self.composition_op!r}")

    @classmethod
    def keys(cls) -> list[str]:
        inv = {v: k for k, v in _KEY_ALIASES.items()}
        return [inv.get(f.name, f.name) for f in fields(cls)]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, val in d.items():
            name = _KEY_ALIASES.get(key, key)
            if name not in types:
                raise KeyError(f"unknown config key {key!r}; valid keys: {', '.join(cls.keys())}")
            kw[name] = _coerce(val, types[name])
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Parse flat ``key = value`` lines; ``#`` starts a comment."""
        d = {}
        with open(path) as f:
            for i, line in enumerate(f, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                sep = "=" if "=" in line else (":" if ":" in line else None)
                if sep is None:
                    raise ValueError(f"{path}:{i}: expected 'key = value'")
                k, v = (s.strip() for s in line.split(sep, 1))
                d[k] = v
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        inv = {v: k for k, v in _KEY_ALIASES.items()}
        return {inv.get(k, k): v for k, v in dataclasses.asdict(self).items()}

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def _coerce(val, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        if isinstance(val, bool):
            return val
        return str(val).strip().lower() in ("1", "true", "yes", "on")
    if typ == "int":
        return int(val)
    if typ == "float":
        return float(val)
    return str(val)


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Named, independent substream of a root seed."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def training_queries(graph: KnowledgeGraph) -> np.ndarray:
    """(source, relation, gold) for every train triple in both directions."""
    t = graph.triples
    inv = np.stack([t[:, 2], t[:, 1] + graph.n_relations, t[:, 0]], axis=1)
    return np.concatenate([t, inv])


# -- path exploitation ------------------------------------------------------

def build_densified_triples(paths: Sequence[ReasoningPath]) -> list[VirtualTriple]:
    """Virtual triples from harvested paths.

    A positive path over entities ``e_1..e_n`` yields ``(e_1, r_{1:n-1}, e_n)``.
    Any path with at least three relation steps also yields the prefixes
    ``(e_1, r_{1:i}, e_{i+1})`` for ``i = 2..n-2``. Duplicates are dropped.
    """
    out, seen = [], set()

    def add(src, q, body, tgt):
        key = (src, tuple(body), tgt)
        if key not in seen:
            seen.add(key)
            out.append(VirtualTriple(src, q, tuple(body), tgt))

    for p in paths:
        rels = p.relations
        ents = p.entities
        n = len(ents)
        if p.polarity is Polarity.POSITIVE and n >= 2:
            add(p.source, p.query_rel, rels, ents[-1])
        if len(rels) >= 3:
            for i in range(2, n - 1):
                add(p.source, p.query_rel, rels[:i], ents[i])
    return out


def build_estep_targets(neg_paths: Sequence[ReasoningPath], store: RuleStore) -> list[EStepTarget]:
    """Distillation targets: each negative path's conclusion plus every fact on it.

    All targets of a path share the weight ``w_rule * prior_weight``.
    Paths whose rule collapses under loop elision contribute nothing.
    """
    out = []
    for p in neg_paths:
        try:
            key = induce_rule(p)
        except EmptyRule:
            continue
        rule = store.get(key)
        if rule is None:
            continue
        w = rule.weight * p.prior_weight
        out.append(EStepTarget(p.source, p.query_rel, p.terminal, w))
        ents = p.entities
        for i, r in enumerate(p.relations):
            out.append(EStepTarget(ents[i], r, ents[i + 1], w))
    return out


# -- trainer ----------------------------------------------------------------

class Trainer:
    """Owns the predictor, the path miner and the rule store for one graph.

    ``dev`` (id triples) enables patience-based pretraining and best-epoch
    selection; ``filter_splits`` are extra id arrays for the filtered
    ranking (train is always included).
    """

    def __init__(self, graph: KnowledgeGraph, cfg: TrainConfig, dev: np.ndarray | None = None,
                 filter_splits: Sequence[np.ndarray] = (), log_path=None):
        self.graph = graph
        self.cfg = cfg
        self.dev = None if dev is None else np.asarray(dev, dtype=np.int64).reshape(-1, 3)
        extra = [self.dev] if self.dev is not None else []
        self.filter = build_filter(graph, graph.triples, *extra, *filter_splits)
        self.predictor = Predictor(
            graph, PredictorParams.init(graph.n_entities, graph.n_aug_relations, cfg.dim,
                                        rng_stream(cfg.seed, "init_predictor")),
            composition=cfg.composition_op, label_smoothing=cfg.label_smoothing)
        self.miner = PathMiner(
            graph, PolicyParams.init(graph.n_entities, graph.n_aug_relations, cfg.policy_dim,
                                     cfg.policy_hidden, rng_stream(cfg.seed, "init_policy")),
            max_steps=cfg.max_steps, action_cap=cfg.action_cap)
        self.rules = RuleStore(cfg.rule_init_weight)
        self.optimizer = Optimizer(cfg.optimizer, cfg.lr)
        self.policy_optimizer = (None if cfg.policy_optimizer == "sgd"
                                 else Optimizer(cfg.policy_optimizer, cfg.lr_policy))
        self.batch_rng = rng_stream(cfg.seed, "batches")
        self.rollout_rng = rng_stream(cfg.seed, "rollouts")
        self.queries = training_queries(graph)
        self.history: list[dict] = []
        self.log_path = log_path
        self._path_cache: dict = {}

    # -- bookkeeping --

    def _log(self, rec: dict) -> None:
        self.history.append(rec)
        logger.info(json.dumps(rec))
        if self.log_path:
            with open(self.log_path, "a") as f:
                f.write(json.dumps(rec) + "\n")

    def _batches(self):
        order = self.batch_rng.permutation(len(self.queries))
        bs = self.cfg.batch_size
        for lo in range(0, len(order), bs):
            yield self.queries[order[lo:lo + bs]]

    def dev_mrr(self) -> float:
        if self.dev is None or len(self.dev) == 0:
            return float("nan")
        rep = evaluate(self.predictor, self.dev, self.filter, seed=self.cfg.seed, bucket_edges=None)
        return rep.metrics["mrr"]

    def set_predictor_params(self, params: PredictorParams) -> None:
        self.predictor.params = params

    def fork(self, cfg: TrainConfig | None = None, **overrides) -> "Trainer":
        """Copy of the current state under a new config, for ablation runs.

        Predictor and rule weights are copied; the frozen policy and the path
        cache are shared. The batch stream restarts from the config seed.
        """
        cfg = (cfg or self.cfg).replace(**overrides)
        new = Trainer.__new__(Trainer)
        new.graph, new.cfg, new.dev, new.filter = self.graph, cfg, self.dev, self.filter
        new.predictor = Predictor(self.graph, self.predictor.params.copy(), composition=cfg.composition_op,
                                  label_smoothing=cfg.label_smoothing)
        new.miner = self.miner
        new.rules = RuleStore.from_json(self.rules.to_json(), cfg.rule_init_weight)
        new.optimizer = Optimizer(cfg.optimizer, cfg.lr)
        new.policy_optimizer = self.policy_optimizer
        new.batch_rng = rng_stream(cfg.seed, "joint_batches")
        new.rollout_rng = rng_stream(cfg.seed, "joint_rollouts")
        new.queries = self.queries
        new.history = []
        new.log_path = None
        new._path_cache = self._path_cache
        return new

    # -- phases --

    def label_epoch(self) -> float:
        """One pass of plain label-loss training."""
        losses = []
        for batch in self._batches():
            loss, _, grads = self.predictor.loss_and_grad(LossBatch(label=batch))
            self.optimizer.step(self.predictor.params, grads)
            losses.append(loss)
        return float(np.mean(losses))

    def pretrain_predictor(self, epochs: int | None = None) -> None:
        epochs = self.cfg.epochs_pretrain_gnn if epochs is None else epochs
        best, best_params, bad = -1.0, None, 0
        for ep in range(epochs):
            loss = self.label_epoch()
            mrr = self.dev_mrr()
            self._log({"phase": "pretrain_gnn", "epoch": ep, "loss": loss, "dev_mrr": mrr})
            if np.isnan(mrr):
                continue
            if mrr > best:
                best, best_params, bad = mrr, self.predictor.params.copy(), 0
            else:
                bad += 1
                if bad >= self.cfg.patience:
                    logger.info("pretrain_gnn: patience reached at epoch %d", ep)
                    break
        if best_params is not None:
            self.predictor.params = best_params

    def pretrain_policy(self, epochs: int | None = None) -> None:
        epochs = self.cfg.epochs_pretrain_rl if epochs is None else epochs
        bs = self.cfg.batch_size
        for ep in range(epochs):
            order = self.batch_rng.permutation(len(self.queries))
            stats = []
            for lo in range(0, len(order), bs):
                batch = [tuple(q) for q in self.queries[order[lo:lo + bs]].tolist()]
                stats.append(self.miner.reinforce_update(
                    batch, self.cfg.rollouts_per_query, self.cfg.lr_policy, self.rollout_rng,
                    entropy_coef=self.cfg.entropy_coef, optimizer=self.policy_optimizer)["mean_reward"])
            self._log({"phase": "pretrain_rl", "epoch": ep, "mean_reward": float(np.mean(stats))})
        self._path_cache.clear()

    def pretrain(self) -> None:
        self.pretrain_predictor()
        self.pretrain_policy()

    def harvest(self, s: int, r: int, gold: int) -> list[ReasoningPath]:
        key = (s, r, gold)
        paths = self._path_cache.get(key)
        if paths is None:
            excl = self.miner.gold_exclusion(s, r, gold)
            paths = self.miner.beam_search(s, r, self.cfg.beam_width, excl)
            for p in paths:
                p.polarity = classify(p, gold)
            self._path_cache[key] = paths
        return paths

    def em_epoch(self) -> dict:
        """One epoch of E-step gradient steps each followed by an M-step.

        The policy is frozen, so harvested paths are cached across epochs.
        """
        cfg = self.cfg
        stats = {"loss": [], "label": [], "den": [], "elbo": [], "n_virtual": 0, "n_targets": 0,
                 "n_pos": 0, "n_neg": 0, "rules_updated": 0}
        for bi, batch in enumerate(self._batches()):
            paths = []
            for s, r, gold in batch.tolist():
                paths.extend(self.harvest(s, r, gold))
            neg = [p for p in paths if p.polarity is Polarity.NEGATIVE]
            for p in paths:
                try:
                    self.rules.get_or_insert(induce_rule(p))
                except EmptyRule:
                    pass
            virtual = build_densified_triples(paths) if cfg.beta else []
            targets = build_estep_targets(neg, self.rules) if cfg.gamma else []

            loss, parts, grads = self.predictor.loss_and_grad(LossBatch(
                label=batch, virtual=virtual, elbo=targets, beta=cfg.beta, gamma=cfg.gamma, lam=cfg.lam))
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss in batch {bi}: {parts}")
            self.optimizer.step(self.predictor.params, grads)

            items = []
            if neg:
                enc = self.predictor.encode()
                for p in neg:
                    try:
                        key = induce_rule(p)
                    except EmptyRule:
                        continue
                    p_target = float(self.predictor.forward(p.source, p.query_rel, enc)[p.terminal])
                    items.append((key, p.prior_weight, p_target))
            stats["rules_updated"] += m_step_batch(self.rules, items, cfg.lr_rule)

            stats["loss"].append(loss)
            for k in ("label", "den", "elbo"):
                stats[k].append(parts[k])
            stats["n_virtual"] += len(virtual)
            stats["n_targets"] += len(targets)
            stats["n_pos"] += len(paths) - len(neg)
            stats["n_neg"] += len(neg)
        return {k: (float(np.mean(v)) if isinstance(v, list) else v) for k, v in stats.items()}

    def joint_train(self, epochs: int | None = None, select_best: bool = True) -> None:
        epochs = self.cfg.epochs_joint if epochs is None else epochs
        best, snapshot = -1.0, None
        for ep in range(epochs):
            t0 = time.perf_counter()
            if self.cfg.policy_refresh:
                self.pretrain_policy(1)
            rec = self.em_epoch()
            rec.update(phase="joint", epoch=ep, dev_mrr=self.dev_mrr(), rules=len(self.rules),
                       seconds=round(time.perf_counter() - t0, 3))
            self._log(rec)
            if select_best and not np.isnan(rec["dev_mrr"]) and rec["dev_mrr"] > best:
                best = rec["dev_mrr"]
                snapshot = (self.predictor.params.copy(), self.rules.to_json())
        if snapshot is not None:
            self.predictor.params = snapshot[0]
            self.rules = RuleStore.from_json(snapshot[1], self.cfg.rule_init_weight)

    def plain_train(self, epochs: int, select_best: bool = True) -> None:
        """Label-loss-only continuation, the backbone counterpart of ``joint_train``."""
        best, snapshot = -1.0, None
        for ep in range(epochs):
            loss = self.label_epoch()
            mrr = self.dev_mrr()
            self._log({"phase": "plain", "epoch": ep, "loss": loss, "dev_mrr": mrr})
            if select_best and not np.isnan(mrr) and mrr > best:
                best, snapshot = mrr, self.predictor.params.copy()
        if snapshot is not None:
            self.predictor.params = snapshot
