"""Scene-graph data model, canonical ordering and serialization, file I/O.

Relations are nodes; edges are directed and unlabeled.  A node id is its
position in ``SceneGraph.labels``.
"""
from __future__ import annotations

import json
from collections import deque
from pathlib import Path
from typing import Iterable, Sequence

DELETE = "DELETE"
EOS = "EOS"
UNK = "UNK"
PAD = "PAD"
RESERVED = frozenset({DELETE, EOS, UNK, PAD})

# individualization search is exact up to this many leaves, then falls back to ids
_MAX_CANON_LEAVES = 512


class GraphError(ValueError):
    pass


class ReservedLabel(GraphError):
    pass


class InvalidLabel(GraphError):
    pass


class SelfLoop(GraphError):
    pass


class UnknownNode(GraphError):
    pass


class TripleFormatError(ValueError):
    def __init__(self, line: int, field: str, message: str):
        super().__init__(f"line {line}: field {field!r}: {message}")
        self.line = line
        self.field = field


def normalize_label(text: str) -> str:
    """Lowercase and join whitespace-separated words with underscores."""
    return "_".join(text.lower().split())


def check_label(label: str) -> None:
    if label in RESERVED:
        raise ReservedLabel(f"label {label!r} is reserved")
    if not label or label != label.lower() or any(c.isspace() for c in label):
        raise InvalidLabel(f"label {label!r} must be a non-empty lowercase token")
    if "#" in label or "|" in label:
        raise InvalidLabel(f"label {label!r} contains '#' or '|'")


class SceneGraph:
    """Directed labeled graph; node ids are dense ``0..n-1``."""

    __slots__ = ("labels", "edges")

    def __init__(self, labels: Iterable[str] = (), edges: Iterable[tuple[int, int]] = ()):
        self.labels: list[str] = []
        self.edges: set[tuple[int, int]] = set()
        for label in labels:
            self.add_node(label)
        for head, tail in edges:
            self.add_edge(head, tail)

    def __len__(self) -> int:
        return len(self.labels)

    def __repr__(self) -> str:
        return f"SceneGraph(labels={self.labels!r}, edges={sorted(self.edges)!r})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SceneGraph):
            return NotImplemented
        return canonical_serialize(self) == canonical_serialize(other)

    def add_node(self, label: str) -> int:
        check_label(label)
        self.labels.append(label)
        return len(self.labels) - 1

    def add_edge(self, head: int, tail: int) -> None:
        n = len(self.labels)
        for node in (head, tail):
            if not (isinstance(node, int) and 0 <= node < n):
                raise UnknownNode(f"node {node!r} not in graph of {n} nodes")
        if head == tail:
            raise SelfLoop(f"self-loop on node {head}")
        self.edges.add((head, tail))

    def copy(self) -> SceneGraph:
        g = SceneGraph()
        g.labels = list(self.labels)
        g.edges = set(self.edges)
        return g

    def degree(self, node: int) -> int:
        return sum((h == node) + (t == node) for h, t in self.edges)

    def out_neighbors(self, node: int) -> list[int]:
        return sorted(t for h, t in self.edges if h == node)

    def in_neighbors(self, node: int) -> list[int]:
        return sorted(h for h, t in self.edges if t == node)

    def subgraph(self, keep: Sequence[int]) -> SceneGraph:
        """Induced subgraph on ``keep``, re-densified in the given order."""
        remap = {old: new for new, old in enumerate(keep)}
        g = SceneGraph()
        g.labels = [self.labels[i] for i in keep]
        g.edges = {(remap[h], remap[t]) for h, t in self.edges if h in remap and t in remap}
        return g

    def to_json(self) -> dict:
        return {"nodes": list(self.labels), "edges": [list(e) for e in sorted(self.edges)]}

    @classmethod
    def from_json(cls, obj: dict) -> SceneGraph:
        return cls(obj["nodes"], (tuple(e) for e in obj["edges"]))


class ExtendedGraph:
    """A scene graph plus DELETE dummy nodes, each pointing at one victim."""

    __slots__ = ("base", "dummy_nodes")

    def __init__(self, base: SceneGraph | None = None, dummy_nodes: Iterable[int] = ()):
        self.base = base if base is not None else SceneGraph()
        self.dummy_nodes: set[int] = set(dummy_nodes)

    def __len__(self) -> int:
        return len(self.base)

    @property
    def labels(self) -> list[str]:
        return self.base.labels

    @property
    def edges(self) -> set[tuple[int, int]]:
        return self.base.edges

    def add_node(self, label: str) -> int:
        return self.base.add_node(label)

    def add_dummy(self, victim: int) -> int:
        if not 0 <= victim < len(self.base) or victim in self.dummy_nodes:
            raise UnknownNode(f"victim {victim} is not a materialized non-dummy node")
        self.base.labels.append(DELETE)
        node = len(self.base.labels) - 1
        self.dummy_nodes.add(node)
        self.base.edges.add((node, victim))
        return node

    def add_edge(self, head: int, tail: int) -> None:
        if head in self.dummy_nodes or tail in self.dummy_nodes:
            raise GraphError("DELETE dummies carry exactly one edge")
        self.base.add_edge(head, tail)

    def check(self) -> None:
        for d in self.dummy_nodes:
            incident = [e for e in self.base.edges if d in e]
            if len(incident) != 1 or incident[0][0] != d or incident[0][1] in self.dummy_nodes:
                raise GraphError(f"dummy {d} must have exactly one edge to a non-dummy victim")


# ---------------------------------------------------------------------------
# canonical order


def _refine(labels: Sequence[str], out_adj, in_adj, initial: Sequence[int] | None = None) -> list[int]:
    """Colour refinement over directed neighbourhoods; returns stable ranks."""
    n = len(labels)
    if initial is None:
        order = sorted(set(labels))
        rank = {lab: i for i, lab in enumerate(order)}
        colors = [rank[lab] for lab in labels]
    else:
        colors = list(initial)
    n_classes = len(set(colors))
    while True:
        sigs = [
            (colors[v], tuple(sorted(colors[u] for u in out_adj[v])), tuple(sorted(colors[u] for u in in_adj[v])))
            for v in range(n)
        ]
        distinct = sorted(set(sigs))
        index = {s: i for i, s in enumerate(distinct)}
        colors = [index[s] for s in sigs]
        if len(distinct) == n_classes:
            return colors
        n_classes = len(distinct)


def _bfs_order(labels: Sequence[str], out_adj, in_deg, key) -> list[int]:
    n = len(labels)
    roots = sorted((v for v in range(n) if in_deg[v] == 0), key=key)
    seen = [False] * n
    order: list[int] = []

    def run(seeds):
        queue = deque(seeds)
        for s in seeds:
            seen[s] = True
        while queue:
            v = queue.popleft()
            order.append(v)
            for c in sorted((u for u in out_adj[v] if not seen[u]), key=key):
                seen[c] = True
                queue.append(c)

    run(roots)
    while len(order) < n:
        # rootless remainder (cycles): seed from the smallest unvisited node
        run([min((v for v in range(n) if not seen[v]), key=key)])
    return order


def _adjacency(graph: SceneGraph):
    n = len(graph.labels)
    out_adj: list[list[int]] = [[] for _ in range(n)]
    in_adj: list[list[int]] = [[] for _ in range(n)]
    for h, t in graph.edges:
        out_adj[h].append(t)
        in_adj[t].append(h)
    return out_adj, in_adj


def _serialize_with_order(graph: SceneGraph, order: Sequence[int]) -> str:
    tags = [""] * len(graph.labels)
    seen: dict[str, int] = {}
    for v in order:
        lab = graph.labels[v]
        k = seen.get(lab, 0)
        seen[lab] = k + 1
        tags[v] = f"{lab}#{k}"
    nodes = " ".join(tags[v] for v in order)
    edges = sorted(f"{tags[h]}->{tags[t]}" for h, t in graph.edges)
    if not edges:
        return nodes
    return f"{nodes} | {' '.join(edges)}"


def _canonical(graph: SceneGraph) -> tuple[list[int], str]:
    labels = graph.labels
    n = len(labels)
    if n == 0:
        return [], ""
    out_adj, in_adj = _adjacency(graph)
    in_deg = [len(a) for a in in_adj]
    base = _refine(labels, out_adj, in_adj)

    leaves = 0
    best: tuple[str, list[int]] | None = None

    def search(colors: list[int]) -> None:
        nonlocal leaves, best
        groups: dict[int, list[int]] = {}
        for v, c in enumerate(colors):
            groups.setdefault(c, []).append(v)
        tied = [g for g in groups.values() if len(g) > 1]
        if not tied or leaves >= _MAX_CANON_LEAVES:
            leaves += 1
            order = _bfs_order(labels, out_adj, in_deg, key=lambda v: (labels[v], colors[v], v))
            s = _serialize_with_order(graph, order)
            if best is None or s < best[0]:
                best = (s, order)
            return
        cell = min(tied, key=lambda g: colors[g[0]])
        for v in cell:
            # individualize v: give it a colour just below its cell, then refine
            indiv = [2 * c + 1 for c in colors]
            indiv[v] -= 1
            search(_refine(labels, out_adj, in_adj, indiv))

    search(base)
    assert best is not None
    return best[1], best[0]


def canonical_order(graph: SceneGraph) -> list[int]:
    """Deterministic node order: multi-source BFS from in-degree-0 roots.

    Roots and BFS children are visited in (label, structural colour) order.
    Structural colours come from colour refinement, and nodes still tied
    after refinement are individualized so the order does not depend on
    node numbering.  Rootless components are seeded from their smallest node.
    """
    return _canonical(graph)[0]


def canonical_serialize(graph: SceneGraph) -> str:
    """``label#k`` nodes in canonical order, then sorted ``a#i->b#j`` edges."""
    return _canonical(graph)[1]


def occurrence_tags(graph: SceneGraph) -> list[str]:
    """``label#k`` tag for every node id, ``k`` counted in canonical order."""
    tags = [""] * len(graph.labels)
    seen: dict[str, int] = {}
    for v in canonical_order(graph):
        lab = graph.labels[v]
        tags[v] = f"{lab}#{seen.get(lab, 0)}"
        seen[lab] = seen.get(lab, 0) + 1
    return tags


# ---------------------------------------------------------------------------
# triples and files


class Triple:
    __slots__ = ("source", "query", "target")

    def __init__(self, source: SceneGraph, query: Sequence[str], target: SceneGraph):
        if not query:
            raise ValueError("query must be non-empty")
        self.source = source
        self.query = list(query)
        self.target = target

    def __repr__(self) -> str:
        return f"Triple(source={self.source!r}, query={self.query!r}, target={self.target!r})"

    def to_json(self) -> dict:
        return {"source": self.source.to_json(), "query": self.query, "target": self.target.to_json()}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), ensure_ascii=False, separators=(", ", ": "))


def _graph_field(obj: dict, name: str, line: int) -> SceneGraph:
    if name not in obj:
        raise TripleFormatError(line, name, "missing")
    g = obj[name]
    if not isinstance(g, dict) or not isinstance(g.get("nodes"), list) or not isinstance(g.get("edges"), list):
        raise TripleFormatError(line, name, "expected {'nodes': [...], 'edges': [...]}")
    try:
        return SceneGraph(g["nodes"], (tuple(e) for e in g["edges"]))
    except (GraphError, TypeError, ValueError) as exc:
        raise TripleFormatError(line, name, str(exc)) from None


def parse_triple(text: str, line: int = 1) -> Triple:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TripleFormatError(line, "<json>", str(exc)) from None
    if not isinstance(obj, dict):
        raise TripleFormatError(line, "<json>", "expected an object")
    source = _graph_field(obj, "source", line)
    if "query" not in obj:
        raise TripleFormatError(line, "query", "missing")
    query = obj["query"]
    if not isinstance(query, list) or not query or not all(isinstance(t, str) and t for t in query):
        raise TripleFormatError(line, "query", "expected a non-empty list of tokens")
    target = _graph_field(obj, "target", line)
    return Triple(source, query, target)


def read_triples(path: str | Path) -> list[Triple]:
    triples = []
    with open(path, encoding="utf-8") as fh:
        for i, raw in enumerate(fh, start=1):
            if raw.strip():
                triples.append(parse_triple(raw, i))
    return triples


def write_triples(path: str | Path, triples: Iterable[Triple]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in triples:
            fh.write(t.dumps() + "\n")


# ---------------------------------------------------------------------------
# DOT


def _dot_escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"')


def to_dot(graph: SceneGraph | ExtendedGraph, name: str = "g") -> str:
    if isinstance(graph, ExtendedGraph):
        base, dummies = graph.base, graph.dummy_nodes
    else:
        base, dummies = graph, set()
    lines = [f"digraph {name} {{"]
    for i, lab in enumerate(base.labels):
        if i in dummies:
            lines.append(f'  n{i} [label="{DELETE}", shape=box, style=filled, fillcolor=salmon];')
        else:
            lines.append(f'  n{i} [label="{_dot_escape(lab)}"];')
    for h, t in sorted(base.edges):
        style = " [style=dashed, color=red]" if h in dummies else ""
        lines.append(f"  n{h} -> n{t}{style};")
    lines.append("}")
    return "\n".join(lines) + "\n"
