"""Dataset loading and coverage-preserving train subsampling."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .kg import CoverageError, TripleFormatError

logger = logging.getLogger(__name__)

SPLIT_FILES = {"train": "train.txt", "dev": "valid.txt", "test": "test.txt"}
PROTECT_FILE = "protect.txt"


class InfeasibleFractionError(ValueError):
    def __init__(self, min_fraction: float, cover_size: int, target: int):
        super().__init__(
            f"covering set needs {cover_size} triples but target is {target}; "
            f"minimum feasible fraction is {min_fraction:.6f}")
        self.min_fraction = min_fraction


def read_triples(path) -> list[tuple[str, str, str]]:
    """Read a tab-separated ``head<TAB>relation<TAB>tail`` file."""
    out = []
    with open(path, encoding="utf-8") as f:
        for i, line in enumerate(f, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or any(not p for p in parts):
                raise TripleFormatError(i, f"{os.fspath(path)}: expected 3 tab-separated fields")
            out.append((parts[0], parts[1], parts[2]))
    return out


def write_triples(path, triples) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for h, r, t in triples:
            f.write(f"{h}\t{r}\t{t}\n")


@dataclass
class DatasetBundle:
    train: list
    dev: list
    test: list
    name: str = ""
    meta: dict = field(default_factory=dict)


def check_coverage(train, *others) -> None:
    """Raise CoverageError if ``others`` mention names absent from ``train``."""
    ents = {x for h, _, t in train for x in (h, t)}
    rels = {r for _, r, _ in train}
    bad_e, bad_r = [], []
    for split in others:
        for h, r, t in split:
            for x in (h, t):
                if x not in ents and x not in bad_e:
                    bad_e.append(x)
            if r not in rels and r not in bad_r:
                bad_r.append(r)
    if bad_e or bad_r:
        raise CoverageError(
            f"dev/test reference names absent from train: entities {bad_e[:10]}, relations {bad_r[:10]}",
            bad_e, bad_r)


def load_dataset(dir_path) -> DatasetBundle:
    splits = {}
    for key, fname in SPLIT_FILES.items():
        p = os.path.join(dir_path, fname)
        if not os.path.exists(p):
            raise FileNotFoundError(f"missing split file {p}")
        splits[key] = read_triples(p)
    check_coverage(splits["train"], splits["dev"], splits["test"])
    meta = {"source": os.path.abspath(dir_path)}
    meta_path = os.path.join(dir_path, "sparsify.json")
    if os.path.exists(meta_path):
        with open(meta_path) as f:
            meta.update(json.load(f))
    return DatasetBundle(name=os.path.basename(os.path.normpath(dir_path)), meta=meta, **splits)


def target_size(n: int, fraction: float) -> int:
    # the epsilon keeps e.g. 0.29 * 100 from flooring to 28
    return int(math.floor(fraction * n + 1e-9))


def sparsify(train, fraction: float, seed: int, protect=()) -> list:
    """Subsample ``train`` to ``floor(fraction * len(train))`` triples.

    Every entity and relation of the input keeps at least one triple. A
    covering set is seeded first (entities then relations, in first-seen id
    order, each taking one uniformly drawn incident triple if still
    uncovered); the rest is filled by uniform sampling without replacement.
    Output preserves input order.

    Triples listed in ``protect`` enter the covering set before the
    coverage pass.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    n = len(train)
    target = target_size(n, fraction)
    rng = np.random.default_rng(seed)

    ent_id: dict = {}
    rel_id: dict = {}
    by_ent: list[list[int]] = []
    by_rel: list[list[int]] = []
    for i, (h, r, t) in enumerate(train):
        for x in (h, t):
            if x not in ent_id:
                ent_id[x] = len(ent_id)
                by_ent.append([])
        if r not in rel_id:
            rel_id[r] = len(rel_id)
            by_rel.append([])
        by_ent[ent_id[h]].append(i)
        if t != h:
            by_ent[ent_id[t]].append(i)
        by_rel[rel_id[r]].append(i)

    chosen = np.zeros(n, dtype=bool)
    ent_cov = np.zeros(len(ent_id), dtype=bool)
    rel_cov = np.zeros(len(rel_id), dtype=bool)

    def take(i):
        h, r, t = train[i]
        chosen[i] = True
        ent_cov[ent_id[h]] = ent_cov[ent_id[t]] = True
        rel_cov[rel_id[r]] = True

    if protect:
        protect = set(map(tuple, protect))
        for i, tr in enumerate(train):
            if tuple(tr) in protect:
                take(i)
    for e, incident in enumerate(by_ent):
        if not ent_cov[e]:
            take(incident[rng.integers(len(incident))])
    for r, incident in enumerate(by_rel):
        if not rel_cov[r]:
            take(incident[rng.integers(len(incident))])

    cover = int(chosen.sum())
    if cover > target:
        raise InfeasibleFractionError(cover / n, cover, target)
    rest = np.flatnonzero(~chosen)
    extra = rng.choice(rest, size=target - cover, replace=False)
    chosen[extra] = True
    logger.debug("sparsify: cover=%d fill=%d target=%d", cover, len(extra), target)
    return [train[i] for i in np.flatnonzero(chosen)]


def write_sparsified(in_dir, out_dir, fraction: float, seed: int) -> dict:
    """Sparsify ``in_dir/train.txt`` into ``out_dir``; dev/test are copied unchanged.

    Triples listed in an optional ``in_dir/protect.txt`` are always kept.
    """
    bundle = load_dataset(in_dir)
    protect_path = os.path.join(in_dir, PROTECT_FILE)
    protect = read_triples(protect_path) if os.path.exists(protect_path) else []
    sub = sparsify(bundle.train, fraction, seed, protect=protect)
    os.makedirs(out_dir, exist_ok=True)
    write_triples(os.path.join(out_dir, "train.txt"), sub)
    write_triples(os.path.join(out_dir, "valid.txt"), bundle.dev)
    write_triples(os.path.join(out_dir, "test.txt"), bundle.test)
    meta = {
        "fraction": fraction,
        "seed": seed,
        "n_input": len(bundle.train),
        "n_output": len(sub),
        "n_protected": len(protect),
        "n_dev": len(bundle.dev),
        "n_test": len(bundle.test),
        "source": os.path.abspath(in_dir),
    }
    with open(os.path.join(out_dir, "sparsify.json"), "w") as f:
        json.dump(meta, f, indent=2)
    return meta
