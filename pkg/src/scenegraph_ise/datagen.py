"""Synthetic (source, query, target) triple generator.

Base graphs are sampled structurally: ``k`` objects, 0-2 attributes per
object (object -> attribute) and ``k - 1`` relation nodes linking the objects
into a tree (object -> relation -> object).  One operation per triple.

Randomness: every example draws from its own PCG64 stream seeded with
``SeedSequence([seed, split_code, example_index])``, so output is fixed by
(seed, configs) regardless of generation order.
"""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import SceneGraph, Triple, canonical_order, check_label, write_triples
from .oracle import roundtrip_check

INSERT, DELETE_OP, SUBSTITUTE = "insert", "delete", "substitute"
OPERATIONS = (INSERT, DELETE_OP, SUBSTITUTE)
SPLITS = ("train", "dev", "test")
_SPLIT_CODE = {"train": 1, "dev": 2, "test": 3}
_HOLDOUT_CODE = 99

_TOKEN_RE = re.compile(r"[a-z0-9_']+|[^\sa-z0-9_']")


class VocabError(ValueError):
    pass


class NoSubstitutableNode(Exception):
    pass


class NoDeletableNode(Exception):
    pass


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass
class VocabConfig:
    objects: list[str]
    attributes: list[str]
    relations: list[str]
    substitution_groups: list[list[str]] = field(default_factory=list)
    templates: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        pools = self.objects + self.attributes + self.relations
        for lab in pools:
            check_label(lab)
        dup = [lab for lab, c in Counter(pools).items() if c > 1]
        if dup:
            raise VocabError(f"labels listed twice: {dup}")
        seen: set[str] = set()
        for group in self.substitution_groups:
            if seen & set(group):
                raise VocabError(f"substitution groups overlap on {sorted(seen & set(group))}")
            unknown = set(group) - set(pools)
            if unknown:
                raise VocabError(f"substitution group members not in vocab: {sorted(unknown)}")
            seen |= set(group)
        for op in OPERATIONS:
            if not self.templates.get(op):
                raise VocabError(f"no templates for {op}")
            for tpl in self.templates[op]:
                if "**" not in tpl or (op == SUBSTITUTE and "@@" not in tpl):
                    raise VocabError(f"template {tpl!r} lacks a placeholder")

    def kind(self, label: str) -> str:
        if label in self._object_set:
            return "object"
        if label in self._attribute_set:
            return "attribute"
        if label in self._relation_set:
            return "relation"
        raise VocabError(f"unknown label {label!r}")

    @property
    def _object_set(self):
        return frozenset(self.objects)

    @property
    def _attribute_set(self):
        return frozenset(self.attributes)

    @property
    def _relation_set(self):
        return frozenset(self.relations)

    def group_of(self, label: str) -> list[str]:
        for group in self.substitution_groups:
            if label in group:
                return group
        return [label]

    def without(self, held_out: set[str]) -> VocabConfig:
        return VocabConfig(
            [x for x in self.objects if x not in held_out],
            [x for x in self.attributes if x not in held_out],
            [x for x in self.relations if x not in held_out],
            [[x for x in g if x not in held_out] for g in self.substitution_groups],
            self.templates,
        )


def parse_vocab(text: str) -> VocabConfig:
    lists: dict[str, list[str]] = {"objects": [], "attributes": [], "relations": []}
    groups: list[list[str]] = []
    templates: dict[str, list[str]] = {op: [] for op in OPERATIONS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(":")
        key, value = key.strip(), value.strip()
        if not sep:
            raise VocabError(f"line {lineno}: expected 'key: value'")
        if key in lists:
            lists[key].extend(value.split())
        elif key == "group":
            groups.append(value.split())
        elif key.startswith("template.") and key[len("template."):] in templates:
            templates[key[len("template."):]].append(value)
        else:
            raise VocabError(f"line {lineno}: unknown key {key!r}")
    return VocabConfig(lists["objects"], lists["attributes"], lists["relations"], groups, templates)


def load_vocab(path: str | Path | None = None) -> VocabConfig:
    if path is None:
        text = resources.files("scenegraph_ise").joinpath("data/default_vocab.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return parse_vocab(text)


@dataclass
class GenConfig:
    train: int = 8000
    dev: int = 1000
    test: int = 1000
    seed: int = 0
    op_mix: dict[str, float] = field(default_factory=lambda: {INSERT: 1 / 3, DELETE_OP: 1 / 3, SUBSTITUTE: 1 / 3})
    min_objects: int = 1
    max_objects: int = 3
    # probability of 0, 1, 2 attributes on each object
    attr_probs: tuple[float, float, float] = (0.4, 0.4, 0.2)
    # fraction of object/attribute labels kept out of the training split
    holdout: float = 0.0

    def __post_init__(self):
        if min(self.train, self.dev, self.test) <= 0:
            raise ValueError("split counts must be positive")
        if abs(sum(self.op_mix.values()) - 1.0) > 1e-9 or set(self.op_mix) - set(OPERATIONS):
            raise ValueError("op_mix must be a distribution over insert/delete/substitute")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if len(self.attr_probs) != 3 or abs(sum(self.attr_probs) - 1.0) > 1e-9:
            raise ValueError("attr_probs must be three probabilities")


# Size presets tuned so average source-graph node counts land on the
# dataset statistics of the four public benchmarks (2.0 / 2.9 / 3.8 / 5.9).
PROFILES: dict[str, dict] = {
    "user": dict(min_objects=1, max_objects=1, attr_probs=(0.0, 0.65, 0.35), holdout=0.10),
    "mscoco": dict(min_objects=1, max_objects=2, attr_probs=(0.35, 0.5, 0.15), holdout=0.04),
    "gcc": dict(min_objects=1, max_objects=3, attr_probs=(0.5, 0.4, 0.1), holdout=0.03),
    "rsicd": dict(min_objects=2, max_objects=4, attr_probs=(0.65, 0.3, 0.05), holdout=0.12),
}


def profile_config(profile: str, **overrides) -> GenConfig:
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    return GenConfig(**{**PROFILES[profile], **overrides})


def example_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _SPLIT_CODE[split], index])))


# ---------------------------------------------------------------------------
# base graphs


def _pick(rng: np.random.Generator, pool: Sequence[str], k: int) -> list[str]:
    idx = rng.choice(len(pool), size=k, replace=False)
    return [pool[i] for i in idx]


def sample_base_graph(
    rng: np.random.Generator,
    vocab: VocabConfig,
    size_range: tuple[int, int],
    attr_probs: Sequence[float] = (0.4, 0.4, 0.2),
) -> SceneGraph:
    lo, hi = size_range
    if hi > len(vocab.objects) or hi - 1 > len(vocab.relations):
        raise VocabError("size range exceeds vocabulary capacity")
    k = int(rng.integers(lo, hi + 1))
    g = SceneGraph()
    objects = [g.add_node(lab) for lab in _pick(rng, vocab.objects, k)]
    n_attrs = [int(rng.choice(3, p=attr_probs)) for _ in objects] if vocab.attributes else [0] * k
    total = min(sum(n_attrs), len(vocab.attributes))
    attr_labels = iter(_pick(rng, vocab.attributes, total))
    for obj, n in zip(objects, n_attrs):
        for _ in range(n):
            lab = next(attr_labels, None)
            if lab is None:
                break
            g.add_edge(obj, g.add_node(lab))
    rel_labels = _pick(rng, vocab.relations, k - 1)
    for i in range(1, k):
        j = int(rng.integers(i))
        rel = g.add_node(rel_labels[i - 1])
        a, b = (objects[i], objects[j]) if rng.random() < 0.5 else (objects[j], objects[i])
        g.add_edge(a, rel)
        g.add_edge(rel, b)
    return g


def _kinds(graph: SceneGraph, vocab: VocabConfig) -> list[str]:
    return [vocab.kind(lab) for lab in graph.labels]


def _relations_of(graph: SceneGraph, kinds: list[str], obj: int) -> list[int]:
    return sorted({u for h, t in graph.edges for u in (h, t) if obj in (h, t) and u != obj and kinds[u] == "relation"})


def _attributes_of(graph: SceneGraph, kinds: list[str], obj: int) -> list[int]:
    return sorted(t for h, t in graph.edges if h == obj and kinds[t] == "attribute")


def deletable_nodes(graph: SceneGraph, vocab: VocabConfig) -> list[int]:
    """Attributes, and objects hanging on exactly one relation.

    Relation nodes and interior objects are excluded so the remaining graph
    stays connected.
    """
    kinds = _kinds(graph, vocab)
    n_objects = kinds.count("object")
    out = []
    for v, kind in enumerate(kinds):
        if kind == "attribute":
            out.append(v)
        elif kind == "object" and n_objects > 1 and len(_relations_of(graph, kinds, v)) == 1:
            out.append(v)
    return out


def deletion_closure(graph: SceneGraph, vocab: VocabConfig, victim: int) -> list[int]:
    """The victim plus the attribute and relation nodes that would be orphaned."""
    kinds = _kinds(graph, vocab)
    if kinds[victim] != "object":
        return [victim]
    return [victim, *_attributes_of(graph, kinds, victim), *_relations_of(graph, kinds, victim)]


def _remove(graph: SceneGraph, nodes: Sequence[int]) -> SceneGraph:
    gone = set(nodes)
    return graph.subgraph([v for v in range(len(graph)) if v not in gone])


def _fill(template: str, old: str, new: str | None = None) -> list[str]:
    text = template.replace("**", old)
    if new is not None:
        text = text.replace("@@", new)
    return tokenize(text)


def _choose_template(rng: np.random.Generator, vocab: VocabConfig, op: str) -> str:
    tpls = vocab.templates[op]
    return tpls[int(rng.integers(len(tpls)))]


def apply_delete(
    graph: SceneGraph, rng: np.random.Generator, vocab: VocabConfig, victim: int | None = None
) -> tuple[SceneGraph, list[str]]:
    candidates = deletable_nodes(graph, vocab)
    if victim is None:
        if not candidates:
            raise NoDeletableNode("graph has no deletable node")
        victim = candidates[int(rng.integers(len(candidates)))]
    elif victim not in candidates:
        raise NoDeletableNode(f"node {victim} is not deletable")
    modified = _remove(graph, deletion_closure(graph, vocab, victim))
    return modified, _fill(_choose_template(rng, vocab, DELETE_OP), graph.labels[victim])


def mention(graph: SceneGraph, vocab: VocabConfig, node: int) -> str:
    """Phrase naming ``node`` together with the context it attaches to.

    ``red bridge`` for an attribute, ``small dog near car`` for an object
    hanging on a relation.
    """
    kinds = _kinds(graph, vocab)
    labels = graph.labels
    pos = {v: i for i, v in enumerate(canonical_order(graph))}
    if kinds[node] == "attribute":
        owner = next(h for h, t in graph.edges if t == node)
        return f"{labels[node]} {labels[owner]}"
    if kinds[node] == "relation":
        heads = [h for h, t in graph.edges if t == node]
        tails = [t for h, t in graph.edges if h == node]
        return " ".join([*(labels[v] for v in heads), labels[node], *(labels[v] for v in tails)])
    attrs = sorted(_attributes_of(graph, kinds, node), key=pos.get)
    noun = " ".join([*(labels[a] for a in attrs), labels[node]])
    rels = _relations_of(graph, kinds, node)
    if not rels:
        return noun
    rel = rels[0]
    if (node, rel) in graph.edges:
        other = next(t for h, t in graph.edges if h == rel)
        return f"{noun} {labels[rel]} {labels[other]}"
    other = next(h for h, t in graph.edges if t == rel)
    return f"{labels[other]} {labels[rel]} {noun}"


def apply_insert(
    graph: SceneGraph, rng: np.random.Generator, vocab: VocabConfig, victim: int | None = None
) -> tuple[SceneGraph, SceneGraph, list[str]]:
    """Reverse delete: ``graph`` is the target; returns (source, target, query)."""
    candidates = deletable_nodes(graph, vocab)
    if victim is None:
        if not candidates:
            raise NoDeletableNode("graph has no removable node to insert")
        victim = candidates[int(rng.integers(len(candidates)))]
    source = _remove(graph, deletion_closure(graph, vocab, victim))
    return source, graph, _fill(_choose_template(rng, vocab, INSERT), mention(graph, vocab, victim))


def apply_substitute(
    graph: SceneGraph, rng: np.random.Generator, vocab: VocabConfig
) -> tuple[SceneGraph, list[str]]:
    present = set(graph.labels)
    options = []
    for v, lab in enumerate(graph.labels):
        others = [m for m in vocab.group_of(lab) if m != lab and m not in present]
        if others:
            options.append((v, others))
    if not options:
        raise NoSubstitutableNode("no node has an unused substitution partner")
    v, others = options[int(rng.integers(len(options)))]
    new = others[int(rng.integers(len(others)))]
    modified = graph.copy()
    modified.labels[v] = new
    old = graph.labels[v]
    return modified, _fill(_choose_template(rng, vocab, SUBSTITUTE), old, new)


def make_triple(rng: np.random.Generator, vocab: VocabConfig, cfg: GenConfig, max_tries: int = 100) -> tuple[Triple, str]:
    ops = list(cfg.op_mix)
    probs = np.array([cfg.op_mix[o] for o in ops])
    for _ in range(max_tries):
        base = sample_base_graph(rng, vocab, (cfg.min_objects, cfg.max_objects), cfg.attr_probs)
        first = ops[int(rng.choice(len(ops), p=probs))]
        # fall back through the remaining operations in fixed order
        for op in [first, *(o for o in OPERATIONS if o != first)]:
            try:
                if op == INSERT:
                    source, target, query = apply_insert(base, rng, vocab)
                elif op == DELETE_OP:
                    target, query = apply_delete(base, rng, vocab)
                    source = base
                else:
                    target, query = apply_substitute(base, rng, vocab)
                    source = base
            except (NoDeletableNode, NoSubstitutableNode):
                continue
            if roundtrip_check(source, target):
                return Triple(source, query, target), op
    raise RuntimeError("could not generate a valid triple; vocabulary too small?")


def held_out_labels(vocab: VocabConfig, seed: int, fraction: float) -> set[str]:
    if fraction <= 0:
        return set()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _HOLDOUT_CODE])))
    out: set[str] = set()
    for pool in (vocab.objects, vocab.attributes):
        k = int(round(fraction * len(pool)))
        out.update(_pick(rng, pool, k))
    return out


def generate_split(cfg: GenConfig, vocab: VocabConfig, split: str, held_out: set[str] = frozenset()) -> list[Triple]:
    count = getattr(cfg, split)
    pool = vocab.without(set(held_out)) if split == "train" else vocab
    return [make_triple(example_rng(cfg.seed, split, i), pool, cfg)[0] for i in range(count)]


# ---------------------------------------------------------------------------
# statistics


def dataset_stats(splits: dict[str, list[Triple]]) -> dict:
    stats: dict = {}
    train = splits.get("train", [])
    train_labels = {lab for t in train for g in (t.source, t.target) for lab in g.labels}
    train_edges = {
        (g.labels[h], g.labels[e]) for t in train for g in (t.source, t.target) for h, e in g.edges
    }
    for name, triples in splits.items():
        n = max(len(triples), 1)
        row = {
            "count": len(triples),
            "avg_source_nodes": sum(len(t.source) for t in triples) / n,
            "avg_target_nodes": sum(len(t.target) for t in triples) / n,
            "avg_source_edges": sum(len(t.source.edges) for t in triples) / n,
            "avg_target_edges": sum(len(t.target.edges) for t in triples) / n,
            "avg_query_tokens": sum(len(t.query) for t in triples) / n,
        }
        if name != "train":
            labels = [lab for t in triples for g in (t.source, t.target) for lab in g.labels]
            edges = [(g.labels[h], g.labels[e]) for t in triples for g in (t.source, t.target) for h, e in g.edges]
            row["oov_nodes_pct"] = 100.0 * sum(lab not in train_labels for lab in labels) / max(len(labels), 1)
            row["oov_edges_pct"] = 100.0 * sum(e not in train_edges for e in edges) / max(len(edges), 1)
        stats[name] = row
    return stats


_STAT_ROWS = [
    ("Splits", "count"),
    ("Avg. Source Nodes", "avg_source_nodes"),
    ("Avg. Target Nodes", "avg_target_nodes"),
    ("Avg. Source Edges", "avg_source_edges"),
    ("Avg. Target Edges", "avg_target_edges"),
    ("OOV Nodes (%)", "oov_nodes_pct"),
    ("OOV Edges (%)", "oov_edges_pct"),
]


def format_stats(stats: dict) -> str:
    names = list(stats)
    width = max(len(r[0]) for r in _STAT_ROWS)
    lines = [f"{'Statistics':<{width}} | " + " | ".join(f"{n:>8}" for n in names)]
    lines.append("-" * len(lines[0]))
    for title, key in _STAT_ROWS:
        cells = []
        for n in names:
            val = stats[n].get(key)
            if val is None:
                cells.append(f"{'-':>8}")
            elif key == "count":
                cells.append(f"{val:>8d}")
            else:
                cells.append(f"{val:>8.2f}")
        lines.append(f"{title:<{width}} | " + " | ".join(cells))
    return "\n".join(lines) + "\n"


def generate_dataset(cfg: GenConfig, vocab: VocabConfig, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    held = held_out_labels(vocab, cfg.seed, cfg.holdout)
    splits = {}
    for split in SPLITS:
        splits[split] = generate_split(cfg, vocab, split, held)
        write_triples(out / f"{split}.jsonl", splits[split])
    stats = dataset_stats(splits)
    (out / "stats.txt").write_text(format_stats(stats), encoding="utf-8")
    with open(out / "stats.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for split, row in stats.items():
            fh.write(json.dumps({"split": split, **row}, sort_keys=True) + "\n")
    return stats
