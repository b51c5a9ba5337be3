"""Synthetic sparse KGs with planted chain rules ``a_k(x, y) & b_k(y, z) -> q_k(x, z)``."""
from __future__ import annotations

import numpy as np

from .data import DatasetBundle, sparsify


def planted_rule_pool(seed: int = 0, n_entities: int = 300, n_clusters: int = 10,
                      n_rules: int = 2, n_noise_relations: int = 6, n_noise: int = 1600,
                      rule_sources: int = 15, mids_per_source: int = 2, tails_per_mid: float = 1.5,
                      n_test: int = 120, n_dev: int = 60, rule_share: float = 0.3,
                      observed_conclusions: float = 0.0):
    """Unsparsified training pool plus the triples the sparsifier must keep.

    Returns ``(bundle, protect)``. ``bundle.train`` is the pool; dev/test
    are already restricted to pool vocabulary, which any coverage-preserving
    subsample keeps.
    """
    rng = np.random.default_rng(seed)
    ents = [f"e{i:03d}" for i in range(n_entities)]
    cluster = rng.permutation(n_entities) % n_clusters
    members = [np.flatnonzero(cluster == c) for c in range(n_clusters)]

    body: list = []
    concl: list = []
    for k in range(n_rules):
        a, b, q = f"a{k}", f"b{k}", f"q{k}"
        sources = rng.choice(n_entities, size=rule_sources, replace=False)
        mid_tails: dict = {}
        facts = set()
        for x in sources:
            mids = rng.choice(np.setdiff1d(np.arange(n_entities), [x]), size=mids_per_source, replace=False)
            for y in mids:
                body.append((ents[x], a, ents[y]))
                if y not in mid_tails:
                    n_t = int(np.floor(tails_per_mid)) + int(rng.random() < tails_per_mid % 1)
                    mid_tails[y] = rng.choice(np.setdiff1d(np.arange(n_entities), [y]),
                                              size=max(1, n_t), replace=False)
                for z in mid_tails[y]:
                    if z != x:
                        facts.add((ents[x], q, ents[z]))
        for y, tails in mid_tails.items():
            for z in tails:
                body.append((ents[y], b, ents[z]))
        concl.extend(sorted(facts))
    body = list(dict.fromkeys(body))

    noise = set()
    rels = [f"n{j}" for j in range(n_noise_relations)]
    while len(noise) < n_noise:
        j = int(rng.integers(n_noise_relations))
        h = int(rng.integers(n_entities))
        if rng.random() < 0.85:
            t = int(rng.choice(members[(cluster[h] + j + 1) % n_clusters]))
        else:
            t = int(rng.integers(n_entities))
        if t != h:
            noise.add((ents[h], rels[j], ents[t]))
    noise = sorted(noise)

    # held-out rule facts: prefer sources that keep another conclusion in train
    by_src: dict = {}
    for f in concl:
        by_src.setdefault(f[0], []).append(f)
    eligible = [f for f in concl if len(by_src[f[0]]) >= 2]
    order = rng.permutation(len(eligible))
    n_rule_test, n_rule_dev = round(rule_share * n_test), round(rule_share * n_dev)
    held, used_src = [], {}
    for i in order:
        f = eligible[i]
        if used_src.get(f[0], 0) < len(by_src[f[0]]) - 1:
            held.append(f)
            used_src[f[0]] = used_src.get(f[0], 0) + 1
        if len(held) == n_rule_test + n_rule_dev:
            break
    rule_test, rule_dev = held[:n_rule_test], held[n_rule_test:]
    noise_idx = rng.permutation(len(noise))
    n_nt, n_nd = n_test - len(rule_test), n_dev - len(rule_dev)
    noise_test = [noise[i] for i in noise_idx[:n_nt]]
    noise_dev = [noise[i] for i in noise_idx[n_nt:n_nt + n_nd]]

    held_set = set(held) | set(noise_test) | set(noise_dev)
    pool = [t for t in body + concl + noise if t not in held_set]
    held_src = {f[0] for f in held}
    rest_concl = [f for f in concl if f not in held_set]
    sibling = [f for f in rest_concl if f[0] in held_src]
    others = [f for f in rest_concl if f[0] not in held_src]
    keep = rng.permutation(len(others))[:round(observed_conclusions * len(others))]
    protect = body + sibling + [others[i] for i in keep]
    pool_ents = {x for h, _, t in pool for x in (h, t)}
    pool_rels = {r for _, r, _ in pool}

    def covered(ts):
        return [t for t in ts if t[0] in pool_ents and t[2] in pool_ents and t[1] in pool_rels]

    test = covered(rule_test) + covered(noise_test)
    dev = covered(rule_dev) + covered(noise_dev)
    meta = {"generator": "planted_rule_kg", "seed": seed,
            "n_full": len(body) + len(concl) + len(noise), "n_pool": len(pool),
            "n_rule_test": len(covered(rule_test)), "n_rule_dev": len(covered(rule_dev)),
            "rule_relations": [[f"a{k}", f"b{k}", f"q{k}"] for k in range(n_rules)]}
    return DatasetBundle(train=pool, dev=dev, test=test, name=f"planted-pool-{seed}", meta=meta), protect


def planted_rule_kg(seed: int = 0, fraction: float = 0.2, **kw) -> DatasetBundle:
    """Generate a dataset whose held-out rule facts are reachable by chain paths in train.

    Noise relations follow a cluster pattern (relation ``j`` sends cluster
    ``c`` to ``c + j + 1`` with probability 0.85), which an embedding model
    can partly learn. For each rule ``k`` every source ``x`` gets
    ``mids_per_source`` ``a_k`` edges and every mid ``y`` about
    ``tails_per_mid`` ``b_k`` edges; all compositions are ``q_k`` facts.

    ``rule_share`` of dev/test triples are ``q_k`` facts. The train split is
    the remaining pool sparsified to ``fraction`` with rule bodies and a
    share ``observed_conclusions`` of the other ``q_k`` facts kept (all of
    them for sources that have a held-out fact). Keyword arguments go to
    :func:`planted_rule_pool`.
    """
    pool, protect = planted_rule_pool(seed, **kw)
    train = sparsify(pool.train, fraction, seed, protect=protect)
    meta = {**pool.meta, "fraction": fraction}
    return DatasetBundle(train=train, dev=pool.dev, test=pool.test, name=f"planted-{seed}", meta=meta)
