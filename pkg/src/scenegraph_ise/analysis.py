"""Bucketed metric tables and the training-size sweep layout."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

from .metrics import ExampleRecord, MetricsReport, summarize

BUCKETS = (("<5", 0, 5), ("5-10", 5, 10), (">=10", 10, None))
SWEEP_FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass
class BucketRow:
    name: str
    count: int
    report: MetricsReport | None  # None for an empty bucket


def bucket_of(value: int) -> str:
    for name, lo, hi in BUCKETS:
        if value >= lo and (hi is None or value < hi):
            return name
    raise ValueError(f"negative bucket value {value}")


def bucketed(records: Sequence[ExampleRecord], key: Callable[[ExampleRecord], int]) -> list[BucketRow]:
    rows = []
    for name, _, _ in BUCKETS:
        members = [r for r in records if bucket_of(key(r)) == name]
        rows.append(BucketRow(name, len(members), summarize(members) if members else None))
    return rows


def query_length_table(records: Sequence[ExampleRecord]) -> list[BucketRow]:
    return bucketed(records, lambda r: r.query_len)


def graph_size_table(records: Sequence[ExampleRecord]) -> list[BucketRow]:
    return bucketed(records, lambda r: r.target_size)


def _pct(x: float) -> str:
    return f"{100 * x:6.2f}"


def format_bucket_table(title: str, rows: Sequence[BucketRow]) -> str:
    head = f"{title:<14} | {'n':>5} | {'Node F1':>7} | {'Edge F1':>7} | {'Graph Acc':>9}"
    lines = [head, "-" * len(head)]
    for row in rows:
        if row.report is None:
            cells = f"{'n/a':>7} | {'n/a':>7} | {'n/a':>9}"
        else:
            r = row.report
            cells = f"{_pct(r.node_f1):>7} | {_pct(r.edge_f1):>7} | {_pct(r.graph_acc):>9}"
        lines.append(f"{row.name:<14} | {row.count:>5} | {cells}")
    return "\n".join(lines)


def format_sweep_table(results: Sequence[tuple[float, MetricsReport]]) -> str:
    """One row per training fraction, in the order given."""
    head = f"{'Train data':<10} | {'Node F1':>7} | {'Edge F1':>7} | {'Graph Acc':>9}"
    lines = [head, "-" * len(head)]
    for frac, r in results:
        lines.append(f"{f'{round(100 * frac)}%':<10} | {_pct(r.node_f1):>7} | {_pct(r.edge_f1):>7} | {_pct(r.graph_acc):>9}")
    return "\n".join(lines)


def format_report(report: MetricsReport, name: str = "model") -> str:
    head = f"{'Method':<12} | {'Node F1':>7} | {'Edge F1':>7} | {'Graph Acc':>9}"
    row = f"{name:<12} | {_pct(report.node_f1):>7} | {_pct(report.edge_f1):>7} | {_pct(report.graph_acc):>9}"
    return "\n".join([head, "-" * len(head), row])
