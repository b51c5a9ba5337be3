import json

import numpy as np
import pytest

from skgc.cli import main
from skgc.data import load_dataset, read_triples, write_triples
from skgc.evaluation import evaluate
from skgc.kg import build_graph
from skgc.synthetic import planted_rule_kg
from skgc.trainer import TrainConfig, Trainer

SMALL = {"dim": 8, "policy_dim": 4, "policy_hidden": 8, "epochs_pretrain_gnn": 3,
         "epochs_pretrain_rl": 1, "epochs_joint": 2, "batch_size": 64, "gamma": 0.001}


def write_config(path, d):
    path.write_text("".join(f"{k} = {v}\n" for k, v in d.items()))
    return str(path)


def write_dataset(d, train, dev, test):
    d.mkdir(parents=True, exist_ok=True)
    write_triples(d / "train.txt", train)
    write_triples(d / "valid.txt", dev)
    write_triples(d / "test.txt", test)
    return str(d)


@pytest.fixture
def toy3(tmp_path):
    train = [("a", "r", "b"), ("b", "r", "c"), ("c", "s", "a")]
    return write_dataset(tmp_path / "toy3", train, [("a", "s", "c")], [("a", "r", "c"), ("b", "s", "a")])


def test_sparsify_full_fraction_is_identity(tmp_path, toy3):
    out = tmp_path / "sp"
    assert main(["sparsify", "--data", toy3, "--out", str(out), "--fraction", "1.0"]) == 0
    assert read_triples(out / "train.txt") == read_triples(f"{toy3}/train.txt")
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "ok" and man["inputs"]["data/train.txt"]["sha256"]


def test_evaluate_untrained_checkpoint(tmp_path, toy3, capsys):
    pre = tmp_path / "pre"
    assert main(["pretrain", "--data", toy3, "--out", str(pre), "--set", "epochs_pretrain_gnn=0",
                 "--set", "epochs_pretrain_rl=0", "--set", "dim=4"]) == 0
    ev = tmp_path / "ev"
    ranks = tmp_path / "ranks.tsv"
    assert main(["evaluate", "--data", toy3, "--checkpoint", str(pre), "--out", str(ev),
                 "--dump-ranks", str(ranks)]) == 0
    rep = json.loads((ev / "report.json").read_text())
    assert 0.5 / 3 <= rep["metrics"]["mrr"] <= 1.0
    assert rep["metrics"]["n"] == 4
    assert len(ranks.read_text().splitlines()) == 4
    assert "MRR" in capsys.readouterr().out


def test_unknown_config_key_fails_with_one_line(tmp_path, toy3, capsys):
    cfg = write_config(tmp_path / "bad.cfg", {"lamda": 0.1})
    out = tmp_path / "o"
    assert main(["pretrain", "--data", toy3, "--out", str(out), "--config", cfg]) != 0
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and "lamda" in err[0]
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "failed" and "lamda" in man["error"]


def test_missing_inputs_fail_cleanly(tmp_path, toy3, capsys):
    assert main(["evaluate", "--data", toy3, "--checkpoint", str(tmp_path / "nope"), "--out", str(tmp_path / "e")]) == 1
    assert main(["pretrain", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "p")]) == 1
    assert main(["pretrain", "--out", str(tmp_path / "p")]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 3 and all(line.startswith("skgc ") for line in err)


def test_phased_pipeline_matches_library_run(tmp_path):
    """sparsify -> pretrain -> joint-train -> evaluate reproduces an in-process run bit for bit."""
    pool = tmp_path / "pool"
    assert main(["synth", "--out", str(pool), "--seed", "1"]) == 0
    data = tmp_path / "sp"
    assert main(["sparsify", "--data", str(pool), "--out", str(data), "--fraction", "0.2", "--seed", "1"]) == 0
    cfg_path = write_config(tmp_path / "c.cfg", SMALL)
    common = ["--data", str(data), "--config", cfg_path, "--seed", "1"]
    assert main(["pretrain", *common, "--out", str(tmp_path / "pre")]) == 0
    assert main(["joint-train", *common, "--init", str(tmp_path / "pre"), "--out", str(tmp_path / "joint")]) == 0
    assert main(["evaluate", "--data", str(data), "--checkpoint", str(tmp_path / "joint"),
                 "--out", str(tmp_path / "ev")]) == 0
    cli_metrics = json.loads((tmp_path / "ev" / "report.json").read_text())["metrics"]

    b = planted_rule_kg(1)
    assert b.train == load_dataset(data).train
    g = build_graph(b.train)
    dev, test = g.encode(b.dev), g.encode(b.test)
    tr = Trainer(g, TrainConfig.from_dict({**SMALL, "seed": 1}), dev=dev, filter_splits=[test])
    tr.pretrain()
    f = tr.fork()
    f.joint_train()
    lib = evaluate(f.predictor, test, tr.filter, seed=1)
    assert lib.metrics == cli_metrics

    for cmd in (["dump-rules", "--checkpoint", str(tmp_path / "joint")],
                ["dump-paths", "--checkpoint", str(tmp_path / "joint"), "--limit", "2"]):
        assert main([cmd[0], "--data", str(data), "--out", str(tmp_path / cmd[0]), *cmd[1:]]) == 0
    assert (tmp_path / "dump-rules" / "rules.tsv").read_text().startswith("body\thead")
    assert (tmp_path / "dump-paths" / "paths.txt").read_text().count("# ") == 2


def test_rerun_gives_identical_metric_json(tmp_path, toy3):
    for i in range(2):
        assert main(["pretrain", "--data", toy3, "--out", str(tmp_path / f"p{i}"), "--set", "dim=4",
                     "--set", "epochs_pretrain_gnn=4", "--set", "epochs_pretrain_rl=1"]) == 0
        assert main(["evaluate", "--data", toy3, "--checkpoint", str(tmp_path / f"p{i}"),
                     "--out", str(tmp_path / f"e{i}"), "--threads", "1"]) == 0
    a, b = ((tmp_path / f"e{i}" / "report.json").read_text() for i in range(2))
    assert json.loads(a)["metrics"] == json.loads(b)["metrics"]
    assert (tmp_path / "p0" / "predictor.npz").read_bytes() == (tmp_path / "p1" / "predictor.npz").read_bytes()


def test_report_sparsity_table(tmp_path):
    rng = np.random.default_rng(0)
    ents = [f"e{i}" for i in range(15)]
    triples = sorted({(ents[h], f"r{rng.integers(2)}", ents[t])
                      for h, t in rng.integers(0, 15, size=(80, 2)) if h != t})
    data = write_dataset(tmp_path / "d", triples, triples[:3], triples[3:6])
    out = tmp_path / "rep"
    assert main(["report-sparsity", "--data", data, "--out", str(out), "--fractions", "0.5,1.0",
                 "--set", "dim=4", "--set", "epochs_pretrain_gnn=2"]) == 0
    rows = json.loads((out / "sparsity.json").read_text())
    assert [r["fraction"] for r in rows] == [0.5, 1.0]
    assert rows[0]["n_train"] < rows[1]["n_train"] == len(triples)
    assert rows[0]["avg_in_degree"] < rows[1]["avg_in_degree"]
    assert (out / "sparsity.tsv").read_text().startswith("fraction")


def test_bad_fractions_flag(tmp_path, toy3):
    assert main(["report-sparsity", "--data", toy3, "--out", str(tmp_path / "r"), "--fractions", "half"]) == 1
