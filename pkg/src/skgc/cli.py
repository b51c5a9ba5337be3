"""Command-line entry point: ``python -m skgc <command> ...``.

Heavy modules are imported inside the command functions so that
``--threads`` can set the BLAS thread variables before numpy loads.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import subprocess
import sys
import time

logger = logging.getLogger("skgc")

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
MANIFEST = "manifest.json"


class CliError(RuntimeError):
    """Expected failure with a message fit for one line of stderr."""


# -- run bookkeeping -----------------------------------------------------------

def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def version_tag() -> str:
    try:
        from importlib.metadata import version
        base = version("artifact")
    except Exception:
        base = "0+unknown"
    try:
        here = os.path.dirname(os.path.abspath(__file__))
        desc = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=here,
                              capture_output=True, text=True, timeout=5)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{base}+g{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return base


class Run:
    """Collects what goes into ``manifest.json`` for one command."""

    def __init__(self, command: str, argv: list, out_dir: str | None):
        self.out_dir = out_dir
        self.data = {
            "command": command,
            "argv": list(argv),
            "version": version_tag(),
            "status": "running",
            "config": None,
            "seeds": {},
            "inputs": {},
            "outputs": {},
            "timings": {},
            "progress": [],
        }
        self._t0 = time.perf_counter()

    def input(self, label: str, path) -> None:
        path = os.path.abspath(path)
        if os.path.isdir(path):
            for name in sorted(os.listdir(path)):
                p = os.path.join(path, name)
                if os.path.isfile(p) and name != MANIFEST:
                    self.data["inputs"][f"{label}/{name}"] = {"path": p, "sha256": file_sha256(p)}
        elif os.path.isfile(path):
            self.data["inputs"][label] = {"path": path, "sha256": file_sha256(path)}

    def output(self, label: str, path) -> None:
        self.data["outputs"][label] = os.path.abspath(path)

    @contextlib.contextmanager
    def phase(self, name: str):
        t = time.perf_counter()
        yield
        self.data["timings"][name] = round(time.perf_counter() - t, 4)
        self.data["progress"].append(name)

    def finish(self, status: str, error: str | None = None) -> None:
        self.data["status"] = status
        self.data["timings"]["total"] = round(time.perf_counter() - self._t0, 4)
        if error:
            self.data["error"] = error
        if self.out_dir:
            os.makedirs(self.out_dir, exist_ok=True)
            with open(os.path.join(self.out_dir, MANIFEST), "w") as f:
                json.dump(self.data, f, indent=2)


# -- shared helpers ------------------------------------------------------------

def load_config(args):
    from .trainer import TrainConfig
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if overrides:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), **overrides})
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def load_graph_and_splits(data_dir):
    from .data import load_dataset
    from .kg import build_graph
    bundle = load_dataset(data_dir)
    g = build_graph(bundle.train)
    return bundle, g, g.encode(bundle.dev), g.encode(bundle.test)


def _checkpoint_file(path, name):
    return os.path.join(path, name) if os.path.isdir(path) else path


def _require(path, what):
    if not os.path.exists(path):
        raise CliError(f"{what} not found: {path}")
    return path


def _check_vocab(meta, graph, path):
    n_e, n_r = meta.get("n_entities"), meta.get("n_relations")
    if n_e is not None and (n_e, n_r) != (graph.n_entities, graph.n_relations):
        raise CliError(f"{path} was trained on {n_e} entities / {n_r} relations, "
                       f"dataset has {graph.n_entities} / {graph.n_relations}")


def save_state(trainer, out_dir, phase, run):
    """Write predictor, policy and rules of ``trainer`` under ``out_dir``."""
    from .predictor import save_checkpoint
    cfg = trainer.cfg
    meta = dict(phase=phase, config=cfg.to_dict(), n_entities=trainer.graph.n_entities,
                n_relations=trainer.graph.n_relations)
    pred = os.path.join(out_dir, "predictor.npz")
    pol = os.path.join(out_dir, "policy.npz")
    save_checkpoint(pred, trainer.predictor.params, cfg.composition_op, cfg.seed, **meta)
    save_checkpoint(pol, trainer.miner.params, cfg.composition_op, cfg.seed, **meta)
    rules_json = os.path.join(out_dir, "rules.json")
    with open(rules_json, "w") as f:
        json.dump(trainer.rules.to_json(), f)
    rules_tsv = os.path.join(out_dir, "rules.tsv")
    with open(rules_tsv, "w") as f:
        f.write(trainer.rules.to_tsv(trainer.graph))
    for label, p in (("predictor", pred), ("policy", pol), ("rules_json", rules_json), ("rules_tsv", rules_tsv)):
        run.output(label, p)


def load_state(trainer, ckpt_dir):
    from .policy import PolicyParams
    from .predictor import load_checkpoint
    from .rules import RuleStore
    pred_path = _require(os.path.join(ckpt_dir, "predictor.npz"), "predictor checkpoint")
    params, meta = load_checkpoint(pred_path)
    _check_vocab(meta, trainer.graph, pred_path)
    if params.entity.shape[1] != trainer.cfg.dim:
        raise CliError(f"checkpoint dim {params.entity.shape[1]} does not match config dim {trainer.cfg.dim}")
    trainer.set_predictor_params(params)
    pol_path = _require(os.path.join(ckpt_dir, "policy.npz"), "policy checkpoint")
    pol, _ = load_checkpoint(pol_path, cls=PolicyParams)
    trainer.miner.params = pol
    rules_path = os.path.join(ckpt_dir, "rules.json")
    if os.path.exists(rules_path):
        with open(rules_path) as f:
            trainer.rules = RuleStore.from_json(json.load(f), trainer.cfg.rule_init_weight)
    return meta


# -- commands ------------------------------------------------------------------

def cmd_synth(args, run):
    from .data import PROTECT_FILE, SPLIT_FILES, write_triples
    from .synthetic import planted_rule_kg, planted_rule_pool
    seed = 0 if args.seed is None else args.seed
    run.data["seeds"]["graph"] = seed
    with run.phase("generate"):
        if args.fraction is None:
            bundle, protect = planted_rule_pool(seed, n_noise=args.n_noise)
        else:
            bundle, protect = planted_rule_kg(seed, fraction=args.fraction, n_noise=args.n_noise), []
    os.makedirs(args.out, exist_ok=True)
    for key, fname in SPLIT_FILES.items():
        p = os.path.join(args.out, fname)
        write_triples(p, getattr(bundle, key))
        run.output(key, p)
    if protect:
        p = os.path.join(args.out, PROTECT_FILE)
        write_triples(p, protect)
        run.output("protect", p)
    with open(os.path.join(args.out, "generator.json"), "w") as f:
        json.dump(bundle.meta, f, indent=2)
    print(f"wrote {len(bundle.train)} train / {len(bundle.dev)} dev / {len(bundle.test)} test triples to {args.out}")


def cmd_sparsify(args, run):
    from .data import write_sparsified
    seed = 0 if args.seed is None else args.seed
    run.data["seeds"]["sparsify"] = seed
    run.input("data", args.data)
    with run.phase("sparsify"):
        meta = write_sparsified(args.data, args.out, args.fraction, seed)
    run.output("train", os.path.join(args.out, "train.txt"))
    print(f"kept {meta['n_output']} of {meta['n_input']} train triples (fraction {args.fraction})")


def cmd_pretrain(args, run):
    from .trainer import Trainer
    cfg = load_config(args)
    run.data["config"] = cfg.to_dict()
    run.data["seeds"]["root"] = cfg.seed
    run.input("data", args.data)
    bundle, g, dev, test = load_graph_and_splits(args.data)
    os.makedirs(args.out, exist_ok=True)
    log = os.path.join(args.out, "train_log.jsonl")
    if os.path.exists(log):
        os.remove(log)
    tr = Trainer(g, cfg, dev=dev, filter_splits=[test], log_path=log)
    with run.phase("pretrain_gnn"):
        tr.pretrain_predictor()
    with run.phase("pretrain_rl"):
        tr.pretrain_policy()
    save_state(tr, args.out, "pretrain", run)
    run.output("log", log)
    run.data["dev_mrr"] = tr.dev_mrr()
    print(f"pretrained on {len(g.triples)} triples; dev MRR {run.data['dev_mrr']:.4f}")


def cmd_joint_train(args, run):
    from .trainer import Trainer
    cfg = load_config(args)
    run.data["config"] = cfg.to_dict()
    run.data["seeds"]["root"] = cfg.seed
    run.input("data", args.data)
    run.input("init", args.init)
    bundle, g, dev, test = load_graph_and_splits(args.data)
    os.makedirs(args.out, exist_ok=True)
    log = os.path.join(args.out, "train_log.jsonl")
    if os.path.exists(log):
        os.remove(log)
    tr = Trainer(g, cfg, dev=dev, filter_splits=[test])
    load_state(tr, args.init)
    # same substreams as an in-process fork of the pretrained trainer
    tr = tr.fork()
    tr.log_path = log
    with run.phase("joint"):
        tr.joint_train(select_best=not args.last_epoch)
    save_state(tr, args.out, "joint", run)
    run.output("log", log)
    run.data["dev_mrr"] = tr.dev_mrr()
    print(f"joint training done; {len(tr.rules)} rules; dev MRR {run.data['dev_mrr']:.4f}")


def cmd_evaluate(args, run):
    from .evaluation import build_filter, evaluate
    from .predictor import Predictor, load_checkpoint
    path = _require(_checkpoint_file(args.checkpoint, "predictor.npz"), "predictor checkpoint")
    run.input("data", args.data)
    run.input("checkpoint", path)
    bundle, g, dev, test = load_graph_and_splits(args.data)
    params, meta = load_checkpoint(path)
    _check_vocab(meta, g, path)
    run.data["config"] = meta.get("config")
    seed = meta.get("seed", 0) if args.seed is None else args.seed
    run.data["seeds"]["eval"] = seed
    pred = Predictor(g, params, composition=meta.get("composition", "mult"))
    target = test if args.split == "test" else dev
    with run.phase("evaluate"):
        rep = evaluate(pred, target, build_filter(g, g.triples, dev, test), seed=seed)
    os.makedirs(args.out, exist_ok=True)
    report = {"split": args.split, "checkpoint": os.path.abspath(path), "eval_seed": seed,
              "metrics": rep.metrics, "buckets": rep.buckets}
    rj, rt = os.path.join(args.out, "report.json"), os.path.join(args.out, "report.txt")
    with open(rj, "w") as f:
        json.dump(report, f, indent=2)
    table = rep.to_table()
    with open(rt, "w") as f:
        f.write(table + "\n")
    run.output("report_json", rj)
    run.output("report_txt", rt)
    if args.dump_ranks:
        rep.dump_ranks(args.dump_ranks, g)
        run.output("ranks", args.dump_ranks)
    run.data["metrics"] = rep.metrics
    print(table)


def cmd_dump_rules(args, run):
    from .rules import RuleStore
    path = _require(_checkpoint_file(args.checkpoint, "rules.json"), "rule file")
    run.input("data", args.data)
    run.input("rules", path)
    bundle, g, _, _ = load_graph_and_splits(args.data)
    with open(path) as f:
        store = RuleStore.from_json(json.load(f))
    rules = sorted(store, key=lambda r: (-r.weight, r.head, r.body))
    rules = [r for r in rules if r.weight >= args.min_weight]
    lines = ["body\thead\tweight\tupdates"]
    for r in rules:
        body = ",".join(g.relation_name(x) for x in r.body)
        lines.append(f"{body}\t{g.relation_name(r.head)}\t{r.weight:.6f}\t{r.update_count}")
    os.makedirs(args.out, exist_ok=True)
    out = os.path.join(args.out, "rules.tsv")
    with open(out, "w") as f:
        f.write("\n".join(lines) + "\n")
    run.output("rules_tsv", out)
    for line in lines[:args.limit + 1]:
        print(line)


def cmd_dump_paths(args, run):
    from .policy import PathMiner, Polarity, PolicyParams, classify
    from .predictor import load_checkpoint
    path = _require(_checkpoint_file(args.checkpoint, "policy.npz"), "policy checkpoint")
    run.input("data", args.data)
    run.input("policy", path)
    bundle, g, dev, test = load_graph_and_splits(args.data)
    params, meta = load_checkpoint(path, cls=PolicyParams)
    _check_vocab(meta, g, path)
    cfg = meta.get("config") or {}
    miner = PathMiner(g, params, max_steps=int(cfg.get("max_steps", 3)),
                      action_cap=int(cfg.get("action_cap", 256)))
    beam = args.beam or int(cfg.get("beam_width", 4))
    target = (test if args.split == "test" else dev)[:args.limit]
    os.makedirs(args.out, exist_ok=True)
    out = os.path.join(args.out, "paths.txt")
    n_pos = 0
    with run.phase("beam_search"), open(out, "w") as f:
        for h, r, t in target.tolist():
            f.write(f"# {g.entities[h]} {g.relation_name(r)} ? (gold {g.entities[t]})\n")
            for p in miner.beam_search(h, r, width=beam):
                p.polarity = classify(p, t)
                n_pos += p.polarity is Polarity.POSITIVE
                f.write(p.format(g) + "\n")
    run.output("paths", out)
    run.data["positive_paths"] = n_pos
    print(f"wrote paths for {len(target)} queries to {out} ({n_pos} reach the gold answer)")


def cmd_report_sparsity(args, run):
    from .data import PROTECT_FILE, load_dataset, read_triples, sparsify
    from .evaluation import evaluate
    from .kg import build_graph
    from .trainer import Trainer
    cfg = load_config(args)
    run.data["config"] = cfg.to_dict()
    run.data["seeds"]["root"] = cfg.seed
    run.input("data", args.data)
    bundle = load_dataset(args.data)
    pp = os.path.join(args.data, PROTECT_FILE)
    protect = read_triples(pp) if os.path.exists(pp) else []
    try:
        fractions = [float(x) for x in args.fractions.split(",")]
    except ValueError:
        raise CliError(f"--fractions must be comma-separated numbers, got {args.fractions!r}") from None
    rows = []
    for frac in fractions:
        with run.phase(f"fraction_{frac}"):
            train = sparsify(bundle.train, frac, cfg.seed, protect=protect)
            g = build_graph(train)
            dev, test = g.encode(bundle.dev), g.encode(bundle.test)
            tr = Trainer(g, cfg, dev=dev, filter_splits=[test])
            tr.pretrain_predictor()
            base = evaluate(tr.predictor, test, tr.filter, seed=cfg.seed)
            row = {"fraction": frac, "n_train": len(train),
                   "avg_in_degree": g.degree_stats()["avg_in_degree"],
                   "mrr_base": base.metrics["mrr"]}
            if args.joint:
                tr.pretrain_policy()
                tr.joint_train()
                full = evaluate(tr.predictor, test, tr.filter, seed=cfg.seed)
                row["mrr_joint"] = full.metrics["mrr"]
                row["rel_gain"] = (row["mrr_joint"] - row["mrr_base"]) / row["mrr_base"]
            rows.append(row)
    cols = ["fraction", "n_train", "avg_in_degree", "mrr_base"] + (["mrr_joint", "rel_gain"] if args.joint else [])
    lines = ["\t".join(cols)]
    for row in rows:
        lines.append("\t".join(f"{row[c]:.4f}" if isinstance(row[c], float) else str(row[c]) for c in cols))
    os.makedirs(args.out, exist_ok=True)
    js, txt = os.path.join(args.out, "sparsity.json"), os.path.join(args.out, "sparsity.tsv")
    with open(js, "w") as f:
        json.dump(rows, f, indent=2)
    with open(txt, "w") as f:
        f.write("\n".join(lines) + "\n")
    run.output("table_json", js)
    run.output("table_tsv", txt)
    print("\n".join(lines))


COMMANDS = {
    "synth": cmd_synth,
    "sparsify": cmd_sparsify,
    "pretrain": cmd_pretrain,
    "joint-train": cmd_joint_train,
    "evaluate": cmd_evaluate,
    "dump-rules": cmd_dump_rules,
    "dump-paths": cmd_dump_paths,
    "report-sparsity": cmd_report_sparsity,
}


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--data", help="dataset directory with train/valid/test.txt")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--threads", type=int, help="cap on BLAS/OpenMP threads")

    p = argparse.ArgumentParser(prog="skgc", description="Rule-densified GCN link prediction on sparse KGs.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a planted-rule synthetic dataset")
    s.add_argument("--fraction", type=float,
                   help="sparsify to this fraction (default: write the full pool plus protect.txt)")
    s.add_argument("--n-noise", type=int, default=1600)

    s = sub.add_parser("sparsify", parents=[common], help="subsample train keeping vocabulary coverage")
    s.add_argument("--fraction", type=float, required=True)

    sub.add_parser("pretrain", parents=[common], help="pretrain predictor and path policy")

    s = sub.add_parser("joint-train", parents=[common], help="EM training from a pretrain checkpoint")
    s.add_argument("--init", required=True, help="directory written by pretrain")
    s.add_argument("--last-epoch", action="store_true", help="keep the final epoch instead of the best dev epoch")

    s = sub.add_parser("evaluate", parents=[common], help="filtered ranking report")
    s.add_argument("--checkpoint", required=True, help="predictor.npz or a directory holding one")
    s.add_argument("--split", choices=["test", "valid"], default="test")
    s.add_argument("--dump-ranks", metavar="PATH", help="write one rank per query as TSV")

    s = sub.add_parser("dump-rules", parents=[common], help="list mined rules by weight")
    s.add_argument("--checkpoint", required=True, help="rules.json or a directory holding one")
    s.add_argument("--min-weight", type=float, default=0.0)
    s.add_argument("--limit", type=int, default=20, help="rows echoed to stdout")

    s = sub.add_parser("dump-paths", parents=[common], help="beam-search reasoning paths for split queries")
    s.add_argument("--checkpoint", required=True, help="policy.npz or a directory holding one")
    s.add_argument("--split", choices=["test", "valid"], default="test")
    s.add_argument("--beam", type=int)
    s.add_argument("--limit", type=int, default=20)

    s = sub.add_parser("report-sparsity", parents=[common], help="MRR against train fraction")
    s.add_argument("--fractions", default="0.2,0.4,0.6,0.8,1.0")
    s.add_argument("--joint", action="store_true", help="also run joint training per fraction")
    return p


def _setup_logging():
    name = os.environ.get("SKGC_LOG", "WARNING").strip().upper()
    level = int(name) if name.isdigit() else logging.getLevelName(name)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    logger.setLevel(level)


@contextlib.contextmanager
def thread_limit(n):
    if n is None:
        yield
        return
    if n < 1:
        raise CliError("--threads must be >= 1")
    for var in THREAD_VARS:
        os.environ[var] = str(n)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        yield
        return
    with threadpool_limits(limits=n):
        yield


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    _setup_logging()
    needs_data = args.command != "synth"
    run = Run(args.command, argv, args.out)
    run.data["threads"] = args.threads
    try:
        if needs_data and not args.data:
            raise CliError("--data is required")
        with thread_limit(args.threads):
            COMMANDS[args.command](args, run)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one line plus a manifest
        msg = " ".join(str(exc).split()) or type(exc).__name__
        if not isinstance(exc, CliError):
            msg = f"{type(exc).__name__}: {msg}"
            logger.debug("traceback", exc_info=True)
        try:
            run.finish("failed", msg)
        except OSError:
            pass
        print(f"skgc {args.command}: error: {msg}", file=sys.stderr)
        return 1
    run.finish("ok")
    return 0
