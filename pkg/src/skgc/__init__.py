"""Link prediction on sparse knowledge graphs with rule-based densification.

Submodules: ``kg`` (graph store), ``data`` (triple files, sparsifier),
``predictor`` (GCN encoder and scorer), ``policy`` (path miner), ``rules``
(rule store and weight updates), ``trainer`` (pretraining and EM),
``evaluation`` (filtered ranking), ``synthetic`` (planted-rule graphs) and
``cli``. Nothing is imported eagerly so the CLI can cap thread pools first.
"""

__version__ = "0.1.0"
