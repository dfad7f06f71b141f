"""Conversion between (source, target) graph pairs and expansion actions.

The expansion-time node sequence is ``canonical_order(source)`` followed by
one node per non-EOS action.  Attachment indices point into that sequence.
"""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

from .graph import DELETE, EOS, ExtendedGraph, GraphError, SceneGraph, canonical_order, canonical_serialize


class Direction(enum.Enum):
    OUT = "out"  # new node -> existing node
    IN = "in"  # existing node -> new node


class IndexOutOfRange(GraphError):
    pass


@dataclass(frozen=True)
class ExpansionAction:
    label: str
    attachments: tuple[tuple[int, Direction], ...] = ()

    def __post_init__(self):
        if self.label == EOS and self.attachments:
            raise ValueError("EOS carries no attachments")
        if self.label == DELETE and (len(self.attachments) != 1 or self.attachments[0][1] is not Direction.OUT):
            raise ValueError("DELETE carries exactly one OUT attachment")

    @property
    def is_delete(self) -> bool:
        return self.label == DELETE

    @property
    def is_eos(self) -> bool:
        return self.label == EOS

    def __str__(self) -> str:
        if self.is_eos:
            return EOS
        att = ",".join(f"{d.value}:{i}" for i, d in self.attachments)
        return f"{self.label}[{att}]"


EOS_ACTION = ExpansionAction(EOS)


def check_sequence(actions: Sequence[ExpansionAction]) -> None:
    """Raise ValueError unless DELETEs precede inserts and a single EOS ends the list."""
    if not actions or not actions[-1].is_eos or any(a.is_eos for a in actions[:-1]):
        raise ValueError("action sequence must end with exactly one EOS")
    seen_insert = False
    for a in actions[:-1]:
        if a.is_delete and seen_insert:
            raise ValueError("DELETE after INSERT")
        seen_insert |= not a.is_delete


@dataclass
class Alignment:
    kept: dict[int, int] = field(default_factory=dict)
    deleted: set[int] = field(default_factory=set)
    inserted: set[int] = field(default_factory=set)


def align_nodes(source: SceneGraph, target: SceneGraph) -> Alignment:
    """Match nodes by exact label; duplicates pair up by degree, then canonical position."""
    s_pos = {v: i for i, v in enumerate(canonical_order(source))}
    t_pos = {v: i for i, v in enumerate(canonical_order(target))}
    s_deg = [0] * len(source)
    t_deg = [0] * len(target)
    for h, t in source.edges:
        s_deg[h] += 1
        s_deg[t] += 1
    for h, t in target.edges:
        t_deg[h] += 1
        t_deg[t] += 1

    def buckets(graph, deg, pos):
        out: dict[str, list[int]] = {}
        for v, lab in enumerate(graph.labels):
            out.setdefault(lab, []).append(v)
        for nodes in out.values():
            nodes.sort(key=lambda v: (-deg[v], pos[v]))
        return out

    sb = buckets(source, s_deg, s_pos)
    tb = buckets(target, t_deg, t_pos)
    al = Alignment()
    for lab, s_nodes in sb.items():
        t_nodes = tb.get(lab, [])
        for s, t in zip(s_nodes, t_nodes):
            al.kept[s] = t
        al.deleted.update(s_nodes[len(t_nodes):])
    for lab, t_nodes in tb.items():
        al.inserted.update(t_nodes[len(sb.get(lab, [])):])
    return al


def derive_actions(source: SceneGraph, target: SceneGraph) -> list[ExpansionAction]:
    s_order = canonical_order(source)
    s_pos = {v: i for i, v in enumerate(s_order)}
    t_pos = {v: i for i, v in enumerate(canonical_order(target))}
    al = align_nodes(source, target)

    actions = [ExpansionAction(DELETE, ((s_pos[v], Direction.OUT),)) for v in sorted(al.deleted, key=s_pos.get)]

    # BFS over the inserted part of the target, seeded next to kept nodes
    kept_targets = set(al.kept.values())
    undirected: dict[int, set[int]] = {v: set() for v in range(len(target))}
    for h, t in target.edges:
        undirected[h].add(t)
        undirected[t].add(h)

    def key(v):
        return (target.labels[v], t_pos[v])

    seeds = sorted((v for v in al.inserted if undirected[v] & kept_targets), key=key)
    seen = set(seeds)
    ins_order: list[int] = []

    def bfs(start):
        queue = deque(start)
        while queue:
            v = queue.popleft()
            ins_order.append(v)
            for c in sorted((u for u in undirected[v] if u in al.inserted and u not in seen), key=key):
                seen.add(c)
                queue.append(c)

    bfs(seeds)
    while len(ins_order) < len(al.inserted):
        first = min((v for v in al.inserted if v not in seen), key=key)
        seen.add(first)
        bfs([first])

    # expansion index of each materialized target node
    index: dict[int, int] = {t: s_pos[s] for s, t in al.kept.items()}
    next_index = len(source) + len(actions)
    for v in ins_order:
        atts = []
        for h, t in target.edges:
            if h == v and t in index:
                atts.append((index[t], Direction.OUT))
            elif t == v and h in index:
                atts.append((index[h], Direction.IN))
        atts.sort(key=lambda a: (a[0], a[1].value))
        actions.append(ExpansionAction(target.labels[v], tuple(atts)))
        index[v] = next_index
        next_index += 1

    actions.append(EOS_ACTION)
    return actions


def apply_actions(source: SceneGraph, actions: Sequence[ExpansionAction]) -> ExtendedGraph:
    check_sequence(actions)
    ext = ExtendedGraph(source.subgraph(canonical_order(source)))
    for a in actions:
        if a.is_eos:
            break
        n = len(ext)
        for i, _ in a.attachments:
            if not 0 <= i < n:
                raise IndexOutOfRange(f"attachment index {i} with {n} materialized nodes")
        if a.is_delete:
            ext.add_dummy(a.attachments[0][0])
            continue
        v = ext.add_node(a.label)
        for i, d in a.attachments:
            if d is Direction.OUT:
                ext.add_edge(v, i)
            else:
                ext.add_edge(i, v)
    return ext


def reduce_extended(extended: ExtendedGraph) -> SceneGraph:
    """Drop DELETE dummies, their victims and every incident edge."""
    gone = set(extended.dummy_nodes)
    for d in extended.dummy_nodes:
        gone.update(t for h, t in extended.edges if h == d)
    keep = [v for v in range(len(extended)) if v not in gone]
    return extended.base.subgraph(keep)


def roundtrip_check(source: SceneGraph, target: SceneGraph) -> bool:
    try:
        ext = apply_actions(source, derive_actions(source, target))
    except GraphError:
        return False
    return canonical_serialize(reduce_extended(ext)) == canonical_serialize(target)


def expansion_labels(source: SceneGraph, actions: Sequence[ExpansionAction]) -> list[str]:
    """Node labels of the full expansion sequence (source in canonical order, then actions)."""
    return [source.labels[v] for v in canonical_order(source)] + [a.label for a in actions if not a.is_eos]
