"""Acceptance suite: one test and one verdict line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v``; the verdicts are
repeated in the terminal summary. The desk-scale learning run takes up to
half an hour on one core.
"""
import itertools
import json
import random
import re
import time

import numpy as np
import pytest
from acceptance_log import record
from support import tiny_config

from scenegraph_ise.autograd import Tensor, add, grad_check, mul, no_grad, tsum
from scenegraph_ise.cli import main
from scenegraph_ise.datagen import (
    dataset_stats,
    generate_dataset,
    generate_split,
    held_out_labels,
    load_vocab,
    profile_config,
)
from scenegraph_ise.graph import SceneGraph, occurrence_tags, read_triples
from scenegraph_ise.metrics import copy_graph_baseline, edge_f1, node_f1
from scenegraph_ise.model import ISEModel, ModelConfig, Vocab, action_spec, expansion_specs, source_specs
from scenegraph_ise.oracle import derive_actions, roundtrip_check
from scenegraph_ise.training import TrainConfig, evaluate_model, fit

VOCAB = load_vocab()
PROFILES = ("user", "mscoco", "gcc", "rsicd")


def split(profile, name, n, seed=0):
    return generate_split(profile_config(profile, **{name: n}, seed=seed), VOCAB, name)


# -- 1 ---------------------------------------------------------------------


def test_c01_oracle_roundtrip():
    start = time.perf_counter()
    total = ok = 0
    for profile in PROFILES:
        for t in split(profile, "train", 250, seed=11):
            total += 1
            ok += roundtrip_check(t.source, t.target)
    elapsed = time.perf_counter() - start
    passed = total >= 1000 and ok == total and elapsed < 10.0
    assert record(1, passed, f"{ok}/{total} generator triples round-trip across 4 profiles in {elapsed:.2f}s (< 10s)")


# -- 2 ---------------------------------------------------------------------


def _functional(out, seed):
    return tsum(mul(out, np.random.default_rng(seed).normal(size=out.shape)))


def _params(model, *prefixes):
    return [p for name, p in model.params.items() if name.startswith(prefixes)]


def _block_checks(data, shape, pool):
    """Max relative grad_check error per block for one random shape."""
    t = data[shape]
    model = ISEModel(tiny_config(edge_pool=pool), Vocab.build(data), seed=shape)
    rng = np.random.default_rng(100 + shape)
    d = model.config.hidden_dim
    h = Tensor(rng.normal(size=(1, d)), requires_grad=True)
    x = Tensor(rng.normal(size=(len(t.query) + 1, d)), requires_grad=True)
    y = Tensor(rng.normal(size=(len(t.source) + shape % 3 + 1, d)), requires_grad=True)
    actions = derive_actions(t.source, t.target)
    specs = expansion_specs(t.source, actions)

    def loss():
        # the loss head on top of both banks and the node decoder, summed over every gold action
        edges, dist = model.predict_edges(h, y), model.predict_node(h, x, t.query)
        total = model.step_loss(edges, dist, actions[0])
        for a in actions[1:]:
            total = add(total, model.step_loss(edges, dist, a))
        return total

    checks = {
        "query encoder": (lambda: _functional(model.encode_query(t.query), shape), _params(model, "emb.word", "qenc.")),
        "graph encoder": (
            lambda: _functional(model.encode_graph(specs, t.query), shape),
            _params(model, "emb.concept", "genc."),
        ),
        "fusion": (lambda: _functional(model.fuse(h, x, y), shape), [h, x, y, *_params(model, "fuse.")]),
        f"edge bank IN ({pool})": (
            lambda: _functional(model.predict_edges(h, y).p_in, shape),
            [h, y, *_params(model, "edge.in")],
        ),
        f"edge bank OUT ({pool})": (
            lambda: _functional(model.predict_edges(h, y).p_out, shape),
            [h, y, *_params(model, "edge.out")],
        ),
        "node decoder": (
            lambda: _functional(model.predict_node(h, x, t.query).probs, shape),
            [h, x, *_params(model, "node.")],
        ),
        f"loss ({pool})": (loss, [h, x, y, *_params(model, "edge.", "node.gate", "node.copy", "node.vocab")]),
    }
    return {name: grad_check(fn, params) for name, (fn, params) in checks.items()}


def test_c02_gradient_verification():
    data = split("gcc", "train", 10, seed=5)
    worst: dict[str, float] = {}
    for shape, pool in itertools.product(range(5), ("max", "noisy_or")):
        for name, err in _block_checks(data, shape, pool).items():
            worst[name] = max(worst.get(name, 0.0), err)
    passed = all(err < 1e-4 for err in worst.values())
    summary = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert record(2, passed, f"max relative error over 5 shapes (< 1e-4): {summary}")


# -- 3 ---------------------------------------------------------------------


def test_c03_overfit():
    data = split("mscoco", "train", 50, seed=21)
    model = ISEModel(ModelConfig.desk(dropout=0.0), Vocab.build(data), seed=0)
    cfg = TrainConfig(batch_size=8, max_epochs=500, patience=500, warmup_steps=100, lr_scale=0.5,
                      eval_interval=5, time_budget=280)
    start = time.perf_counter()
    result = fit(model, data, data, cfg)
    elapsed = time.perf_counter() - start
    acc = evaluate_model(result.model, data).graph_acc
    epochs = result.log[-1]["epoch"]
    passed = acc == 1.0 and epochs <= 500 and elapsed < 300
    assert record(3, passed, f"50-triple train GAcc {acc:.2%} after {epochs} epochs in {elapsed:.0f}s (100%, <= 500 epochs, < 300s)")


# -- 4 and 5 ---------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_run():
    cfg = profile_config("mscoco", train=2000, dev=200, test=200, seed=0)
    held = held_out_labels(VOCAB, cfg.seed, cfg.holdout)
    splits = {name: generate_split(cfg, VOCAB, name, held) for name in ("train", "dev", "test")}
    vocab = Vocab.build(splits["train"])
    model = ISEModel(ModelConfig.desk(), vocab, seed=0)
    train_cfg = TrainConfig(batch_size=16, max_epochs=60, patience=6, warmup_steps=400, lr_scale=0.5,
                            time_budget=25 * 60)
    start = time.perf_counter()
    result = fit(model, splits["train"], splits["dev"], train_cfg)
    elapsed = time.perf_counter() - start
    report = evaluate_model(result.model, splits["test"])
    return splits, vocab, elapsed, report, result


def test_c04_desk_scale_learning(desk_run):
    splits, vocab, elapsed, report, result = desk_run
    words = {w for s in splits.values() for t in s for w in (*t.query, *t.source.labels, *t.target.labels)}
    stats = dataset_stats(splits)
    sizes_ok = all(abs(stats[s]["avg_source_nodes"] - 2.9) <= 0.5 for s in splits)
    data_ok = (len(splits["train"]), len(splits["dev"]), len(splits["test"])) == (2000, 200, 200)
    vocab_ok = len(vocab) <= 120 and len(words) <= 120
    metrics_ok = report.graph_acc >= 0.85 and report.node_f1 >= 0.95 and report.edge_f1 >= 0.90
    passed = data_ok and vocab_ok and sizes_ok and elapsed <= 1800 and metrics_ok
    detail = (
        f"test GAcc {report.graph_acc:.2%} (>= 85%), Node F1 {report.node_f1:.2%} (>= 95%), "
        f"Edge F1 {report.edge_f1:.2%} (>= 90%); trained {elapsed / 60:.1f} min over {result.log[-1]['epoch']} epochs; "
        f"vocab {len(vocab)} model / {len(words)} corpus (<= 120); "
        "avg source nodes " + ", ".join(f"{s} {stats[s]['avg_source_nodes']:.2f}" for s in splits)
    )
    assert record(4, passed, detail)


def test_c05_beats_copy_graph(desk_run):
    splits, _, _, report, _ = desk_run
    base = copy_graph_baseline(splits["test"])
    passed = report.node_f1 > base.node_f1 and report.edge_f1 > base.edge_f1 and report.graph_acc > base.graph_acc
    detail = (
        f"ISE vs CopyGraph: Node F1 {report.node_f1:.2%} vs {base.node_f1:.2%}, "
        f"Edge F1 {report.edge_f1:.2%} vs {base.edge_f1:.2%}, GAcc {report.graph_acc:.2%} vs {base.graph_acc:.2%}"
    )
    assert record(5, passed, detail)


# -- 6 ---------------------------------------------------------------------


def _brute_f1(pred, gold):
    if not pred and not gold:
        return 1.0
    small, large = sorted([list(pred), list(gold)], key=len)
    best = max(
        (sum(small[i] == large[j] for i, j in enumerate(chosen))
         for chosen in itertools.permutations(range(len(large)), len(small))),
        default=0,
    )
    if best == 0:
        return 0.0
    p, r = best / len(pred), best / len(gold)
    return 2 * p * r / (p + r)


def _edge_items(g):
    tags = occurrence_tags(g)
    return [(tags[h], tags[t]) for h, t in g.edges]


def _random_graph(rnd):
    n = rnd.randint(0, 5)
    g = SceneGraph([rnd.choice("abc") for _ in range(n)])
    for _ in range(rnd.randint(0, 2 * n)):
        if n > 1:
            g.add_edge(*rnd.sample(range(n), 2))
    return g


def test_c06_metric_oracle():
    rnd = random.Random(2024)
    worst = 0.0
    with_duplicates = 0
    for _ in range(200):
        pred, gold = _random_graph(rnd), _random_graph(rnd)
        with_duplicates += len(set(pred.labels)) < len(pred) or len(set(gold.labels)) < len(gold)
        worst = max(worst, abs(node_f1(pred, gold) - _brute_f1(pred.labels, gold.labels)))
        worst = max(worst, abs(edge_f1(pred, gold) - _brute_f1(_edge_items(pred), _edge_items(gold))))
    passed = worst <= 1e-12 and with_duplicates > 0
    assert record(6, passed, f"200 pairs ({with_duplicates} with duplicate labels), max deviation {worst:.1e} (<= 1e-12)")


# -- 7 ---------------------------------------------------------------------


def test_c07_probability_invariants():
    data = [t for p in PROFILES for t in split(p, "train", 60, seed=7)]
    models = [
        ISEModel(tiny_config(edge_sink=bool(k % 2), dropout=0.0), Vocab.build(data), seed=k) for k in range(4)
    ]
    passes = 0
    softmax_err = gate_err = 0.0
    edges_ok = True
    rnd = random.Random(0)
    with no_grad():
        while passes < 1000:
            t = rnd.choice(data)
            model = models[passes % len(models)]
            x = model.encode_query(t.query)
            specs = source_specs(t.source)
            labels = [s.label for s in specs]
            h = model.initial_state(x)
            for a in derive_actions(t.source, t.target):
                edges, dist, h = model.step(h, x, model.encode_graph(specs, t.query), t.query)
                passes += 1
                for probs in (dist.probs.data, dist.p_vocab.data, dist.copy_attn.data):
                    softmax_err = max(softmax_err, abs(probs.sum() - 1.0))
                gate_err = max(gate_err, abs(dist.p_gen.item() + dist.p_copy.item() - 1.0))
                if edges is not None:
                    for p, heads in ((edges.p_in.data, edges.head_in.data), (edges.p_out.data, edges.head_out.data)):
                        edges_ok &= bool(np.all((p >= 0) & (p <= 1)))
                        rows = heads.sum(axis=-1)
                        if model.config.edge_sink:
                            edges_ok &= bool(np.all(rows <= 1 + 1e-9))
                        else:
                            softmax_err = max(softmax_err, float(np.abs(rows - 1).max()))
                specs.append(action_spec(a, labels))
                labels.append(a.label)
    passed = softmax_err <= 1e-9 and gate_err <= 1e-12 and edges_ok
    assert record(7, passed, f"{passes} forward steps: softmax row error {softmax_err:.1e} (<= 1e-9), "
                             f"p_gen + p_copy error {gate_err:.1e} (<= 1e-12), edge probs in [0, 1]: {edges_ok}")


# -- 8 ---------------------------------------------------------------------


def test_c08_determinism(tmp_path):
    cfg = profile_config("gcc", train=80, dev=20, test=20, seed=13)
    generate_dataset(cfg, VOCAB, tmp_path / "a")
    generate_dataset(cfg, VOCAB, tmp_path / "b")
    files_same = all(
        (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        for f in ("train.jsonl", "dev.jsonl", "test.jsonl", "stats.txt")
    )
    runs = []
    for run in "ab":
        triples = read_triples(tmp_path / run / "train.jsonl")
        actions = [[str(a) for a in derive_actions(t.source, t.target)] for t in triples]
        model = ISEModel(tiny_config(dropout=0.1), Vocab.build(triples), seed=3)
        trace = fit(model, triples, triples[:10], TrainConfig(batch_size=8, max_epochs=2, warmup_steps=10, seed=3)).loss_trace
        runs.append((actions, trace))
    actions_same = runs[0][0] == runs[1][0]
    trace_same = runs[0][1] == runs[1][1]
    passed = files_same and actions_same and trace_same
    assert record(8, passed, f"byte-identical files {files_same}, identical actions {actions_same}, "
                             f"identical loss traces {trace_same} ({len(runs[0][1])} steps)")


# -- 9 ---------------------------------------------------------------------


def test_c09_teacher_forcing_equivalence():
    data = split("gcc", "train", 20, seed=9)
    model = ISEModel(ModelConfig.desk(dropout=0.0), Vocab.build(data), seed=1)
    worst = 0.0
    for t in data:
        actions = derive_actions(t.source, t.target)
        whole = [l.item() for l in model.sequence_losses(t.source, t.query, actions)]
        steps = [l.item() for l in model.sequence_losses(t.source, t.query, actions, stepwise=True)]
        worst = max(worst, max(abs(a - b) for a, b in zip(whole, steps)))
    assert record(9, worst <= 1e-9, f"20 triples, max per-step loss difference {worst:.1e} (<= 1e-9)")


# -- 10 --------------------------------------------------------------------

BUCKETS = ["<5", "5-10", ">=10"]
FRACTIONS = ["20%", "40%", "60%", "80%", "100%"]
ROW = re.compile(r"^(\S+)\s*\|(?:\s*\d+\s*\|)?\s*(\S+)\s*\|\s*(\S+)\s*\|\s*(\S+)\s*$")


def _table_rows(text, title):
    lines = text[text.index(title):].splitlines()[2:]
    rows = []
    for line in lines:
        m = ROW.match(line)
        if not m:
            break
        rows.append(m.groups())
    return rows


def test_c10_analysis_harness(tmp_path, capsys):
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["datagen", "--profile", "gcc", "--train", "40", "--dev", "10", "--test", "30", "--out", str(data)]) == 0
    train_args = ["--data", str(data), "--epochs", "2", "--warmup", "10", "--batch-size", "8"]
    assert main(["train", *train_args, "--out", str(run)]) == 0
    capsys.readouterr()
    assert main(["eval", "--model", str(run / "model.ckpt"), "--triples", str(data / "test.jsonl")]) == 0
    out = capsys.readouterr().out
    q_rows = _table_rows(out, "Query Length")
    g_rows = _table_rows(out, "Graph Size")
    assert main(["train", *train_args, "--out", str(tmp_path / "sweep"), "--train-fraction", "0.2", "0.4", "0.6", "0.8", "1.0"]) == 0
    sweep = _table_rows(capsys.readouterr().out, "Train data")

    def numeric(rows):
        return all(re.fullmatch(r"\d+\.\d+|n/a", c) for r in rows for c in r[1:])

    eval_ok = [r[0] for r in q_rows] == BUCKETS and [r[0] for r in g_rows] == BUCKETS and numeric(q_rows + g_rows)
    sweep_ok = [r[0] for r in sweep] == FRACTIONS and numeric(sweep)
    json_ok = "METRICS " in out and "model" in json.loads(out.split("METRICS ", 1)[1])
    passed = eval_ok and sweep_ok and json_ok
    assert record(10, passed, f"eval bucket rows {[r[0] for r in q_rows]} / {[r[0] for r in g_rows]}, "
                              f"sweep rows {[r[0] for r in sweep]}, each with Node F1 / Edge F1 / GAcc")
