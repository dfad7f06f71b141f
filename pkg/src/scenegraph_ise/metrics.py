"""Node F1, edge F1 and exact-match graph accuracy."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from .graph import SceneGraph, canonical_serialize, occurrence_tags


def _multiset_f1(pred: Counter, gold: Counter) -> float:
    n_pred, n_gold = sum(pred.values()), sum(gold.values())
    if n_pred == 0 and n_gold == 0:
        return 1.0
    tp = sum((pred & gold).values())
    if tp == 0:
        return 0.0
    p, r = tp / n_pred, tp / n_gold
    return 2 * p * r / (p + r)


def node_f1(pred: SceneGraph, gold: SceneGraph) -> float:
    return _multiset_f1(Counter(pred.labels), Counter(gold.labels))


def edge_items(graph: SceneGraph) -> list[tuple[str, str]]:
    tags = occurrence_tags(graph)
    return [(tags[h], tags[t]) for h, t in graph.edges]


def edge_f1(pred: SceneGraph, gold: SceneGraph) -> float:
    """F1 over directed edges keyed by occurrence-indexed endpoint labels."""
    return _multiset_f1(Counter(edge_items(pred)), Counter(edge_items(gold)))


def graph_match(pred: SceneGraph, gold: SceneGraph) -> bool:
    return canonical_serialize(pred) == canonical_serialize(gold)


def graph_accuracy(preds: Sequence[SceneGraph], golds: Sequence[SceneGraph]) -> float:
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions vs {len(golds)} gold graphs")
    if not golds:
        return 0.0
    return sum(graph_match(p, g) for p, g in zip(preds, golds)) / len(golds)


@dataclass
class ExampleRecord:
    node_f1: float
    edge_f1: float
    match: bool
    query_len: int
    target_size: int


@dataclass
class MetricsReport:
    node_f1: float
    edge_f1: float
    graph_acc: float
    records: list[ExampleRecord] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"node_f1": self.node_f1, "edge_f1": self.edge_f1, "graph_acc": self.graph_acc, "n": len(self.records)}


def evaluate(preds: Sequence[SceneGraph], golds: Sequence[SceneGraph], queries: Sequence[Sequence[str]]) -> MetricsReport:
    """Corpus metrics: F1 scores are averaged over examples."""
    if not (len(preds) == len(golds) == len(queries)):
        raise ValueError("preds, golds and queries must have equal length")
    records = [
        ExampleRecord(node_f1(p, g), edge_f1(p, g), graph_match(p, g), len(q), len(g))
        for p, g, q in zip(preds, golds, queries)
    ]
    return summarize(records)


def summarize(records: Sequence[ExampleRecord]) -> MetricsReport:
    n = len(records)
    if n == 0:
        return MetricsReport(0.0, 0.0, 0.0, [])
    return MetricsReport(
        sum(r.node_f1 for r in records) / n,
        sum(r.edge_f1 for r in records) / n,
        sum(r.match for r in records) / n,
        list(records),
    )


def copy_graph_baseline(triples) -> MetricsReport:
    """Lower bound that predicts the source graph unchanged."""
    return evaluate([t.source for t in triples], [t.target for t in triples], [t.query for t in triples])
