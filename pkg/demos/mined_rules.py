"""Which chain rules does the path miner recover on a planted-rule graph?

Pretrains the policy on one synthetic graph, harvests beam paths for every
training query of the rule heads, and compares the induced rules against
the planted ``a_k, b_k -> q_k`` chains by sampled body confidence.

    python3 demos/mined_rules.py [seed]
"""
import sys
from collections import Counter

import numpy as np

from skgc.kg import build_graph
from skgc.rules import EmptyRule, empirical_confidence, induce_rule
from skgc.synthetic import planted_rule_kg
from skgc.trainer import TrainConfig, Trainer, training_queries

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
bundle = planted_rule_kg(seed)
g = build_graph(bundle.train)
cfg = TrainConfig(seed=seed, optimizer="adam", lr=0.03, policy_optimizer="adam", lr_policy=0.03,
                  epochs_pretrain_gnn=20, epochs_pretrain_rl=8, beam_width=8)
tr = Trainer(g, cfg)
tr.pretrain()

heads = {g.relations.index(q) for _, _, q in bundle.meta["rule_relations"]}
counts, positive = Counter(), Counter()
for s, r, gold in training_queries(g).tolist():
    if r not in heads:
        continue
    for p in tr.harvest(s, r, gold):
        try:
            rule = induce_rule(p)
        except EmptyRule:
            continue
        counts[rule] += 1
        positive[rule] += p.terminal == gold

rng = np.random.default_rng(seed)
print(f"{'body':<24} {'head':<5} {'paths':>6} {'hit gold':>9} {'confidence':>11}")
for (body, head), n in counts.most_common(12):
    name = ",".join(g.relation_name(x) for x in body)
    conf = empirical_confidence(g, body, head, rng)
    print(f"{name:<24} {g.relation_name(head):<5} {n:>6} {positive[(body, head)]:>9} {conf:>11.2f}")
planted = [f"{a},{b} -> {q}" for a, b, q in bundle.meta["rule_relations"]]
print("planted:", "; ".join(planted))
