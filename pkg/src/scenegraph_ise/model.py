"""The incremental expansion network.

Per expansion step the state is threaded as

    fuse(h, x, y) -> edge banks over y -> LN(MSA(h, y) + h)
                  -> node distribution  -> LN(MSA(h, x) + h) -> next step

where ``x`` is the query encoding (row 0 is the sentence token) and ``y`` the
causally masked encoding of the nodes materialized so far.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import nn
from .autograd import (
    Tensor,
    add,
    clamp_min,
    concat,
    embedding,
    index,
    linear,
    log,
    matmul,
    mul,
    softmax,
    sub,
    tmax,
    tsum,
    attention_weights,
)
from .graph import DELETE, EOS, PAD, UNK, SceneGraph, Triple, canonical_order
from .oracle import Direction, ExpansionAction, derive_actions

CLS = "CLS"
PROB_FLOOR = 1e-12


@dataclass
class ModelConfig:
    word_emb_dim: int = 300
    concept_emb_dim: int = 300
    hidden_dim: int = 512
    ffn_dim: int = 1024
    heads: int = 8
    query_layers: int = 4
    graph_layers: int = 2
    fusion_layers: int = 2
    dropout: float = 0.2
    edge_sink: bool = True  # learned "no edge" key in each edge bank
    edge_pool: str = "max"  # "max" or "noisy_or" over heads
    mention_feature: bool = True  # graph rows whose label occurs in the query get a learned offset
    vocab_size: int = 0
    gen_vocab_size: int = 0

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.edge_pool not in ("max", "noisy_or"):
            raise ValueError(f"unknown edge_pool {self.edge_pool!r}")

    @classmethod
    def desk(cls, **overrides) -> ModelConfig:
        """Small preset for single-core training runs."""
        base = dict(
            word_emb_dim=32, concept_emb_dim=32, hidden_dim=64, ffn_dim=128, heads=4,
            query_layers=2, graph_layers=2, fusion_layers=1, dropout=0.1, edge_pool="noisy_or",
        )
        return cls(**{**base, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


class Vocab:
    """Shared word/label index plus the generation vocabulary.

    Query tokens and node labels share one index (with separate embedding
    tables); the generation vocabulary holds UNK, DELETE, EOS and every label
    seen in training targets.
    """

    SPECIALS = (PAD, UNK, CLS, DELETE, EOS)

    def __init__(self, tokens: Iterable[str], gen_labels: Iterable[str]):
        self.itos = list(self.SPECIALS) + sorted(set(tokens) - set(self.SPECIALS))
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        self.gen = [UNK, DELETE, EOS] + sorted(set(gen_labels) - {UNK, DELETE, EOS})
        self.gen_index = {t: i for i, t in enumerate(self.gen)}

    def __len__(self) -> int:
        return len(self.itos)

    def id(self, token: str) -> int:
        return self.stoi.get(token, self.stoi[UNK])

    @classmethod
    def build(cls, triples: Sequence[Triple]) -> Vocab:
        tokens: set[str] = set()
        gen: set[str] = set()
        for t in triples:
            tokens.update(t.query)
            tokens.update(t.source.labels)
            tokens.update(t.target.labels)
            gen.update(t.target.labels)
        return cls(tokens, gen)

    def to_json(self) -> dict:
        return {"tokens": self.itos[len(self.SPECIALS):], "gen": self.gen[3:]}

    @classmethod
    def from_json(cls, obj: dict) -> Vocab:
        return cls(obj["tokens"], obj["gen"])


class NodeSpec(NamedTuple):
    """One graph-encoder input row: label plus neighbour labels known when it was added."""

    label: str
    out_labels: tuple[str, ...] = ()
    in_labels: tuple[str, ...] = ()


@dataclass
class EdgePrediction:
    p_in: Tensor  # (m,) existing -> new
    p_out: Tensor  # (m,) new -> existing
    head_in: Tensor  # (heads, m)
    head_out: Tensor


@dataclass
class NodeDistribution:
    forms: list[str]
    probs: Tensor  # (F,) over forms
    p_gen: Tensor
    p_copy: Tensor
    p_vocab: Tensor  # (V_gen,)
    copy_attn: Tensor  # (n,)

    def argmax(self) -> str:
        return self.forms[int(np.argmax(self.probs.data))]

    def prob(self, label: str) -> float:
        return float(self.probs.data[self.forms.index(label)]) if label in self.forms else 0.0


def source_specs(source: SceneGraph) -> list[NodeSpec]:
    order = canonical_order(source)
    labels = source.labels
    specs = []
    for v in order:
        outs = tuple(sorted(labels[t] for h, t in source.edges if h == v))
        ins = tuple(sorted(labels[h] for h, t in source.edges if t == v))
        specs.append(NodeSpec(labels[v], outs, ins))
    return specs


def action_spec(action: ExpansionAction, labels: Sequence[str]) -> NodeSpec:
    outs = tuple(sorted(labels[i] for i, d in action.attachments if d is Direction.OUT))
    ins = tuple(sorted(labels[i] for i, d in action.attachments if d is Direction.IN))
    return NodeSpec(action.label, outs, ins)


def expansion_specs(source: SceneGraph, actions: Sequence[ExpansionAction]) -> list[NodeSpec]:
    specs = source_specs(source)
    labels = [s.label for s in specs]
    for a in actions:
        if a.is_eos:
            break
        specs.append(action_spec(a, labels))
        labels.append(a.label)
    return specs


class ISEModel:
    def __init__(self, config: ModelConfig, vocab: Vocab, seed: int = 0, params: nn.ParamStore | None = None):
        config.vocab_size = len(vocab)
        config.gen_vocab_size = len(vocab.gen)
        self.config = config
        self.vocab = vocab
        self.drop = nn.Dropout(config.dropout, np.random.default_rng(seed + 1), train=False)
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = params
        self._pos_cache: dict[int, np.ndarray] = {}

    # -- parameters -------------------------------------------------------

    def _init_params(self, rng: np.random.Generator) -> nn.ParamStore:
        c = self.config
        d = c.hidden_dim
        ps = nn.ParamStore()
        ps.embedding("emb.word", c.vocab_size, c.word_emb_dim, rng)
        ps.embedding("emb.concept", c.vocab_size, c.concept_emb_dim, rng)
        ps.matrix("qenc.proj.w", c.word_emb_dim, d, rng)
        ps.bias("qenc.proj.b", d)
        for i in range(c.query_layers):
            nn.init_encoder_layer(ps, f"qenc.{i}", d, c.ffn_dim, rng)
        ps.matrix("genc.proj.w", c.concept_emb_dim, d, rng)
        ps.bias("genc.proj.b", d)
        ps.matrix("genc.nb_out.w", c.concept_emb_dim, d, rng)
        ps.matrix("genc.nb_in.w", c.concept_emb_dim, d, rng)
        if c.mention_feature:
            ps.embedding("genc.mention", 1, d, rng)
        for i in range(c.graph_layers):
            nn.init_encoder_layer(ps, f"genc.{i}", d, c.ffn_dim, rng)
        for i in range(c.fusion_layers):
            nn.init_attend_block(ps, f"fuse.{i}.x", d, rng)
            nn.init_attend_block(ps, f"fuse.{i}.y", d, rng)
            nn.init_ffn_block(ps, f"fuse.{i}.ff", d, c.ffn_dim, rng)
        nn.init_attention(ps, "edge.in", d, rng, values=False)
        nn.init_attention(ps, "edge.out", d, rng, values=False)
        if c.edge_sink:
            ps.embedding("edge.in.sink", 1, d, rng)
            ps.embedding("edge.out.sink", 1, d, rng)
        nn.init_attend_block(ps, "edge.update", d, rng)
        nn.init_attention(ps, "node.copy", d, rng, values=False)
        nn.init_attend_block(ps, "node.update", d, rng)
        ps.matrix("node.vocab.w", d, c.gen_vocab_size, rng)
        ps.bias("node.vocab.b", c.gen_vocab_size)
        ps.matrix("node.gate.w", d, 2, rng)
        return ps

    def train(self, flag: bool = True, rng: np.random.Generator | None = None) -> None:
        self.drop.train = flag
        if rng is not None:
            self.drop.rng = rng

    def _positions(self, n: int) -> np.ndarray:
        pe = self._pos_cache.get(n)
        if pe is None:
            pe = self._pos_cache[n] = nn.sinusoid_positions(n, self.config.hidden_dim)
        return pe

    # -- encoders ---------------------------------------------------------

    def encode_query(self, tokens: Sequence[str]) -> Tensor:
        if not tokens:
            raise ValueError("empty query")
        ps, c = self.params, self.config
        ids = [self.vocab.stoi[CLS]] + [self.vocab.id(t) for t in tokens]
        e = embedding(ps["emb.word"], ids)
        x = add(linear(e, ps["qenc.proj.w"], ps["qenc.proj.b"]), self._positions(len(ids)))
        x = self.drop(x)
        for i in range(c.query_layers):
            x = nn.encoder_layer(ps, f"qenc.{i}", x, c.heads, self.drop)
        return x

    def encode_graph(self, specs: Sequence[NodeSpec], query: Sequence[str] = ()) -> Tensor:
        ps, c = self.params, self.config
        m = len(specs)
        if m == 0:
            return Tensor(np.zeros((0, c.hidden_dim)))
        vocab = self.vocab
        ids = [vocab.id(s.label) for s in specs]
        nb_ids: list[int] = []
        cols_out, cols_in = [], []
        for row, s in enumerate(specs):
            for lab in s.out_labels:
                cols_out.append((row, len(nb_ids), len(s.out_labels)))
                nb_ids.append(vocab.id(lab))
            for lab in s.in_labels:
                cols_in.append((row, len(nb_ids), len(s.in_labels)))
                nb_ids.append(vocab.id(lab))
        table = ps["emb.concept"]
        h = linear(embedding(table, ids), ps["genc.proj.w"], ps["genc.proj.b"])
        if nb_ids:
            k = len(nb_ids)
            a_out = np.zeros((m, k))
            a_in = np.zeros((m, k))
            for row, col, n in cols_out:
                a_out[row, col] = 1.0 / n
            for row, col, n in cols_in:
                a_in[row, col] = 1.0 / n
            nb = embedding(table, nb_ids)
            if cols_out:
                h = add(h, linear(matmul(Tensor(a_out), nb), ps["genc.nb_out.w"]))
            if cols_in:
                h = add(h, linear(matmul(Tensor(a_in), nb), ps["genc.nb_in.w"]))
        if c.mention_feature:
            words = set(query)
            flags = np.array([[float(s.label in words)] for s in specs])
            if flags.any():
                h = add(h, matmul(Tensor(flags), ps["genc.mention"]))
        y = self.drop(add(h, self._positions(m)))
        mask = nn.causal_mask(m)
        for i in range(c.graph_layers):
            y = nn.encoder_layer(ps, f"genc.{i}", y, c.heads, self.drop, mask)
        return y

    # -- decoder stages ---------------------------------------------------

    def initial_state(self, x: Tensor) -> Tensor:
        return index(x, slice(0, 1))

    def fuse(self, h: Tensor, x: Tensor, y: Tensor) -> Tensor:
        ps, c = self.params, self.config
        if h.shape[-1] != c.hidden_dim or x.shape[-1] != c.hidden_dim or y.shape[-1] != c.hidden_dim:
            raise ValueError(f"dimension mismatch: h {h.shape}, x {x.shape}, y {y.shape}")
        for i in range(c.fusion_layers):
            h = nn.attend_block(ps, f"fuse.{i}.x", h, x, c.heads, self.drop)
            if y.shape[0]:
                h = nn.attend_block(ps, f"fuse.{i}.y", h, y, c.heads, self.drop)
            h = nn.ffn_block(ps, f"fuse.{i}.ff", h, self.drop)
        return h

    def predict_edges(self, h: Tensor, y: Tensor) -> EdgePrediction:
        if y.shape[0] == 0:
            raise ValueError("edge prediction needs at least one existing node")
        w_in, w_out = (self._edge_heads(bank, h, y) for bank in ("edge.in", "edge.out"))
        return EdgePrediction(self._pool(w_in), self._pool(w_out), w_in, w_out)

    def _pool(self, w: Tensor) -> Tensor:
        if self.config.edge_pool == "max":
            return tmax(w, 0)
        # 1 - prod_k (1 - w_k): an edge exists once any head fires, and every head gets gradient
        miss = sub(1.0, index(w, 0))
        for k in range(1, w.shape[0]):
            miss = mul(miss, sub(1.0, index(w, k)))
        return sub(1.0, miss)

    def _edge_heads(self, bank: str, h: Tensor, y: Tensor) -> Tensor:
        """Per-head weights (heads, m) of one direction bank.

        With the sink enabled a learned extra key takes the mass of "no
        edge", so a head is not forced to pick some existing node.
        """
        ps, heads = self.params, self.config.heads
        if not self.config.edge_sink:
            return index(nn.head_weights(ps, bank, h, y, heads), (slice(None), 0))
        keys = concat([ps[f"{bank}.sink"], y], axis=0)
        w = nn.head_weights(ps, bank, h, keys, heads)
        return index(w, (slice(None), 0, slice(1, None)))

    def update_state_after_edges(self, h: Tensor, y: Tensor) -> Tensor:
        if y.shape[0] == 0:
            return h
        return nn.attend_block(self.params, "edge.update", h, y, self.config.heads, self.drop)

    def predict_node(self, h: Tensor, x: Tensor, query_tokens: Sequence[str]) -> NodeDistribution:
        ps, vocab = self.params, self.vocab
        p_vocab = softmax(linear(h, ps["node.vocab.w"], ps["node.vocab.b"]))
        gate = softmax(linear(h, ps["node.gate.w"]))
        tokens_x = index(x, slice(1, None))
        q = linear(h, ps["node.copy.wq"], ps["node.copy.bq"])
        k = linear(tokens_x, ps["node.copy.wk"])
        alpha = attention_weights(q, k)

        forms = list(vocab.gen)
        form_index = dict(vocab.gen_index)
        for tok in query_tokens:
            if tok not in form_index:
                form_index[tok] = len(forms)
                forms.append(tok)
        n_gen, n_forms = len(vocab.gen), len(forms)
        to_forms = np.zeros((len(query_tokens), n_forms))
        for i, tok in enumerate(query_tokens):
            to_forms[i, form_index[tok]] = 1.0
        gen_part = p_vocab
        if n_forms > n_gen:
            gen_part = concat([p_vocab, Tensor(np.zeros((1, n_forms - n_gen)))], axis=1)
        p_gen = index(gate, (slice(None), slice(0, 1)))
        p_copy = index(gate, (slice(None), slice(1, 2)))
        probs = add(mul(p_gen, gen_part), mul(p_copy, matmul(alpha, Tensor(to_forms))))
        return NodeDistribution(
            forms, index(probs, 0), index(p_gen, (0, 0)), index(p_copy, (0, 0)), index(p_vocab, 0), index(alpha, 0)
        )

    def update_state_after_node(self, h: Tensor, x: Tensor) -> Tensor:
        return nn.attend_block(self.params, "node.update", h, x, self.config.heads, self.drop)

    # -- losses -----------------------------------------------------------

    def gold_form(self, label: str, dist: NodeDistribution) -> int:
        if label in dist.forms:
            return dist.forms.index(label)
        return dist.forms.index(UNK)

    def step_loss(self, edges: EdgePrediction | None, dist: NodeDistribution, gold: ExpansionAction) -> Tensor:
        p = index(dist.probs, self.gold_form(gold.label, dist))
        loss = mul(log(clamp_min(p, PROB_FLOOR)), -1.0)
        if edges is not None and not gold.is_eos:
            loss = add(loss, edge_bce(edges, gold))
        return loss

    def step(
        self, h: Tensor, x: Tensor, y: Tensor, query: Sequence[str]
    ) -> tuple[EdgePrediction | None, NodeDistribution, Tensor]:
        """One expansion step; returns edges, node distribution and the carried state."""
        h = self.fuse(h, x, y)
        edges = None
        if y.shape[0]:
            edges = self.predict_edges(h, y)
            h = self.update_state_after_edges(h, y)
        dist = self.predict_node(h, x, query)
        return edges, dist, self.update_state_after_node(h, x)

    def sequence_losses(
        self, source: SceneGraph, query: Sequence[str], actions: Sequence[ExpansionAction], stepwise: bool = False
    ) -> list[Tensor]:
        """Teacher-forced per-step losses.

        By default the whole expansion sequence is encoded once under the
        causal mask and step ``t`` reads its prefix; ``stepwise=True``
        re-encodes the materialized graph at every step instead.
        """
        x = self.encode_query(query)
        specs = expansion_specs(source, actions)
        m0 = len(source)
        y_full = None if stepwise else self.encode_graph(specs, query)
        h = self.initial_state(x)
        losses = []
        for t, gold in enumerate(actions):
            m = m0 + t
            if stepwise:
                y = self.encode_graph(specs[:m], query)
            else:
                y = index(y_full, slice(0, m))
            edges, dist, h = self.step(h, x, y, query)
            losses.append(self.step_loss(edges, dist, gold))
        return losses

    def triple_loss(self, triple: Triple, actions: Sequence[ExpansionAction] | None = None) -> Tensor:
        if actions is None:
            actions = derive_actions(triple.source, triple.target)
        losses = self.sequence_losses(triple.source, triple.query, actions)
        total = losses[0]
        for l in losses[1:]:
            total = add(total, l)
        return total


def edge_bce(edges: EdgePrediction, gold: ExpansionAction) -> Tensor:
    """Mean binary cross-entropy over (existing node x direction) cells."""
    m = edges.p_in.shape[0]
    t_in = np.zeros(m)
    t_out = np.zeros(m)
    for i, d in gold.attachments:
        (t_out if d is Direction.OUT else t_in)[i] = 1.0
    total = None
    for p, target in ((edges.p_in, t_in), (edges.p_out, t_out)):
        pos = mul(log(clamp_min(p, PROB_FLOOR)), target)
        neg = mul(log(clamp_min(sub(1.0, p), PROB_FLOOR)), 1.0 - target)
        term = tsum(add(pos, neg))
        total = term if total is None else add(total, term)
    return mul(total, -1.0 / (2 * m))
