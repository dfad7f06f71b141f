"""Greedy incremental decoding."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .autograd import no_grad
from .graph import DELETE, EOS, UNK, ExtendedGraph, GraphError, SceneGraph, canonical_order, check_label
from .model import ISEModel, action_spec, source_specs
from .oracle import Direction, ExpansionAction, reduce_extended

EDGE_THRESHOLD = 0.5
MAX_STEPS = 64


@dataclass
class DecodeResult:
    graph: SceneGraph
    extended: ExtendedGraph
    actions: list[ExpansionAction] = field(default_factory=list)
    forced_stop: bool = False


def decode(model: ISEModel, source: SceneGraph, query: Sequence[str], max_steps: int = MAX_STEPS) -> DecodeResult:
    """Expand ``source`` one node per step until EOS or ``max_steps`` actions."""
    was_training = model.drop.train
    model.train(False)
    try:
        with no_grad():
            return _decode(model, source, list(query), max_steps)
    finally:
        model.train(was_training)


def _decode(model: ISEModel, source: SceneGraph, query: list[str], max_steps: int) -> DecodeResult:
    specs = source_specs(source)
    labels = [s.label for s in specs]
    dummies: set[int] = set()
    victims: set[int] = set()
    x = model.encode_query(query)
    h = model.initial_state(x)
    actions: list[ExpansionAction] = []
    forced = True
    for _ in range(max_steps):
        y = model.encode_graph(specs, query)
        edges, dist, h = model.step(h, x, y, query)
        label = dist.argmax()
        if label == EOS:
            actions.append(ExpansionAction(EOS))
            forced = False
            break
        real = [i for i in range(len(labels)) if i not in dummies]
        if label == DELETE:
            options = [i for i in real if i not in victims]
            if edges is None or not options:
                # nothing left to delete: treat as termination
                actions.append(ExpansionAction(EOS))
                forced = False
                break
            p_out = edges.p_out.data
            victim = max(options, key=lambda i: (p_out[i], -i))
            action = ExpansionAction(DELETE, ((victim, Direction.OUT),))
            dummies.add(len(labels))
            victims.add(victim)
        else:
            if label != UNK:
                try:
                    check_label(label)
                except GraphError:
                    label = UNK
            atts: list[tuple[int, Direction]] = []
            if edges is not None:
                p_in, p_out = edges.p_in.data, edges.p_out.data
                for i in real:
                    if p_in[i] > EDGE_THRESHOLD:
                        atts.append((i, Direction.IN))
                    if p_out[i] > EDGE_THRESHOLD:
                        atts.append((i, Direction.OUT))
            action = ExpansionAction(label, tuple(atts))
        actions.append(action)
        specs.append(action_spec(action, labels))
        labels.append(label)

    ext = _materialize(source, actions)
    return DecodeResult(reduce_extended(ext), ext, actions, forced)


def _materialize(source: SceneGraph, actions: Sequence[ExpansionAction]) -> ExtendedGraph:
    """Extended graph of the decoded actions, with UNK nodes and their edges dropped."""
    ext = ExtendedGraph(source.subgraph(canonical_order(source)))
    remap: dict[int, int] = {i: i for i in range(len(source))}
    position = len(source)
    for a in actions:
        if a.is_eos:
            break
        if a.is_delete:
            victim = remap.get(a.attachments[0][0])
            if victim is not None and victim not in ext.dummy_nodes:
                remap[position] = ext.add_dummy(victim)
        elif a.label != UNK:
            v = ext.add_node(a.label)
            remap[position] = v
            for i, d in a.attachments:
                j = remap.get(i)
                if j is None or j in ext.dummy_nodes:
                    continue
                if d is Direction.OUT:
                    ext.add_edge(v, j)
                else:
                    ext.add_edge(j, v)
        position += 1
    return ext


def decode_many(model: ISEModel, items: Sequence[tuple[SceneGraph, Sequence[str]]], max_steps: int = MAX_STEPS,
                threads: int = 1) -> list[DecodeResult]:
    if threads <= 1 or len(items) < 2:
        return [decode(model, s, q, max_steps) for s, q in items]
    from concurrent.futures import ProcessPoolExecutor

    chunks = [items[i::threads] for i in range(threads)]
    with ProcessPoolExecutor(threads) as pool:
        parts = list(pool.map(_decode_chunk, [(model, c, max_steps) for c in chunks]))
    out: list[DecodeResult | None] = [None] * len(items)
    for k, part in enumerate(parts):
        for j, res in enumerate(part):
            out[k + j * threads] = res
    return out  # type: ignore[return-value]


def _decode_chunk(args) -> list[DecodeResult]:
    model, items, max_steps = args
    return [decode(model, s, q, max_steps) for s, q in items]
