"""Parameters, attention and transformer blocks, Adam, checkpoints."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .autograd import (
    ShapeError,
    Tensor,
    add,
    attention_weights,
    dropout,
    layer_norm,
    linear,
    matmul,
    relu,
    reshape,
    transpose,
)

NEG_INF = -np.inf


class ParamStore:
    """Named trainable tensors, iterated in name order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def items(self) -> list[tuple[str, Tensor]]:
        return [(k, self._params[k]) for k in sorted(self._params)]

    def values(self) -> list[Tensor]:
        return [self._params[k] for k in sorted(self._params)]

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def num_scalars(self) -> int:
        return sum(p.data.size for p in self._params.values())

    # initializers
    def matrix(self, name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> Tensor:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, rng.uniform(-bound, bound, size=(fan_in, fan_out)))

    def bias(self, name: str, n: int) -> Tensor:
        return self.add(name, np.zeros(n))

    def gain(self, name: str, n: int) -> Tensor:
        return self.add(name, np.ones(n))

    def embedding(self, name: str, rows: int, dim: int, rng: np.random.Generator) -> Tensor:
        return self.add(name, rng.normal(0.0, dim**-0.5, size=(rows, dim)))


def sinusoid_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def causal_mask(length: int) -> np.ndarray:
    return np.triu(np.full((length, length), NEG_INF), k=1)


# ---------------------------------------------------------------------------
# attention


def init_attention(ps: ParamStore, prefix: str, dim: int, rng: np.random.Generator, values: bool = True) -> None:
    # no key bias: it shifts every score in a row equally and the softmax cancels it
    for part in ("q", "k", "v", "o") if values else ("q", "k"):
        ps.matrix(f"{prefix}.w{part}", dim, dim, rng)
        if part != "k":
            ps.bias(f"{prefix}.b{part}", dim)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return transpose(reshape(x, (n, heads, d // heads)), (1, 0, 2))


def head_weights(
    ps: ParamStore, prefix: str, query: Tensor, keys: Tensor, heads: int, mask: np.ndarray | None = None
) -> Tensor:
    """Per-head attention weights, shape (heads, Lq, Lk)."""
    d = query.shape[-1]
    if d % heads:
        raise ShapeError(f"model dim {d} not divisible by {heads} heads")
    q = _split_heads(linear(query, ps[f"{prefix}.wq"], ps[f"{prefix}.bq"]), heads)
    k = _split_heads(linear(keys, ps[f"{prefix}.wk"]), heads)
    return attention_weights(q, k, mask)


def multi_head_attention(
    query_seq: Tensor,
    kv_seq: Tensor,
    mask: np.ndarray | None,
    ps: ParamStore,
    prefix: str,
    num_heads: int,
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention with learned projections.

    Returns the projected output (Lq, d) and the per-head weights
    (heads, Lq, Lk).  ``mask`` is additive with shape (Lq, Lk).
    """
    lq, d = query_seq.shape
    if mask is not None and mask.shape != (lq, kv_seq.shape[0]):
        raise ShapeError(f"mask shape {mask.shape} != {(lq, kv_seq.shape[0])}")
    w = head_weights(ps, prefix, query_seq, kv_seq, num_heads, mask)
    v = _split_heads(linear(kv_seq, ps[f"{prefix}.wv"], ps[f"{prefix}.bv"]), num_heads)
    ctx = reshape(transpose(matmul(w, v), (1, 0, 2)), (lq, d))
    return linear(ctx, ps[f"{prefix}.wo"], ps[f"{prefix}.bo"]), w


# ---------------------------------------------------------------------------
# blocks


def init_ln(ps: ParamStore, prefix: str, dim: int) -> None:
    ps.gain(f"{prefix}.g", dim)
    ps.bias(f"{prefix}.b", dim)


def ln(ps: ParamStore, prefix: str, x: Tensor) -> Tensor:
    return layer_norm(x, ps[f"{prefix}.g"], ps[f"{prefix}.b"])


def init_ffn(ps: ParamStore, prefix: str, dim: int, hidden: int, rng: np.random.Generator) -> None:
    ps.matrix(f"{prefix}.w1", dim, hidden, rng)
    ps.bias(f"{prefix}.b1", hidden)
    ps.matrix(f"{prefix}.w2", hidden, dim, rng)
    ps.bias(f"{prefix}.b2", dim)


def ffn(ps: ParamStore, prefix: str, x: Tensor, drop: "Dropout") -> Tensor:
    hidden = drop(relu(linear(x, ps[f"{prefix}.w1"], ps[f"{prefix}.b1"])))
    return linear(hidden, ps[f"{prefix}.w2"], ps[f"{prefix}.b2"])


@dataclass
class Dropout:
    rate: float = 0.0
    rng: np.random.Generator | None = None
    train: bool = False

    def __call__(self, x: Tensor) -> Tensor:
        return dropout(x, self.rate, self.rng, self.train)


def attend_block(
    ps: ParamStore, prefix: str, h: Tensor, kv: Tensor, heads: int, drop: Dropout, mask: np.ndarray | None = None
) -> Tensor:
    """``LN(MSA(h, kv) + h)``."""
    out, _ = multi_head_attention(h, kv, mask, ps, f"{prefix}.att", heads)
    return ln(ps, f"{prefix}.ln", add(drop(out), h))


def ffn_block(ps: ParamStore, prefix: str, h: Tensor, drop: Dropout) -> Tensor:
    """``LN(FFN(h) + h)``."""
    return ln(ps, f"{prefix}.ln", add(drop(ffn(ps, f"{prefix}.ffn", h, drop)), h))


def init_attend_block(ps: ParamStore, prefix: str, dim: int, rng: np.random.Generator) -> None:
    init_attention(ps, f"{prefix}.att", dim, rng)
    init_ln(ps, f"{prefix}.ln", dim)


def init_ffn_block(ps: ParamStore, prefix: str, dim: int, hidden: int, rng: np.random.Generator) -> None:
    init_ffn(ps, f"{prefix}.ffn", dim, hidden, rng)
    init_ln(ps, f"{prefix}.ln", dim)


def init_encoder_layer(ps: ParamStore, prefix: str, dim: int, hidden: int, rng: np.random.Generator) -> None:
    init_attend_block(ps, f"{prefix}.sa", dim, rng)
    init_ffn_block(ps, f"{prefix}.ff", dim, hidden, rng)


def encoder_layer(
    ps: ParamStore, prefix: str, x: Tensor, heads: int, drop: Dropout, mask: np.ndarray | None = None
) -> Tensor:
    x = attend_block(ps, f"{prefix}.sa", x, x, heads, drop, mask)
    return ffn_block(ps, f"{prefix}.ff", x, drop)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class LrSchedule:
    model_dim: int
    warmup_steps: int = 2000
    scale: float = 1.0

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")

    def __call__(self, step: int) -> float:
        step = max(step, 1)
        return self.scale * self.model_dim**-0.5 * min(step**-0.5, step * self.warmup_steps**-1.5)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(ps: ParamStore, state: AdamState, schedule: LrSchedule, grad_scale: float = 1.0) -> float:
    """One Adam update using ``grad * grad_scale``; zeroes grads afterwards.

    Returns the learning rate used.
    """
    for name, p in ps.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
    state.step += 1
    t = state.step
    lr = schedule(t)
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in ps.items():
        g = p.grad * grad_scale if grad_scale != 1.0 else p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = np.zeros_like(p.data)
    return lr


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout: UTF-8 text header terminated by a line "END", then the parameter
# payloads as little-endian f64 in manifest order.
#   ISE-CHECKPOINT <version>
#   config <json>
#   extra <json>
#   param <name> <shape as d1,d2,...> <offset in scalars>
#   END

CHECKPOINT_VERSION = 1
_MAGIC = "ISE-CHECKPOINT"


class CheckpointError(ValueError):
    pass


def save_checkpoint(ps: ParamStore, config: dict, path: str | Path, extra: dict | None = None) -> None:
    lines = [f"{_MAGIC} {CHECKPOINT_VERSION}", f"config {json.dumps(config, sort_keys=True)}"]
    lines.append(f"extra {json.dumps(extra or {}, sort_keys=True)}")
    offset = 0
    for name, p in ps.items():
        shape = ",".join(str(n) for n in p.shape)
        lines.append(f"param {name} {shape} {offset}")
        offset += p.data.size
    lines.append("END")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in ps.values())
    Path(path).write_bytes(header + payload)


def load_checkpoint(path: str | Path, expected_config: dict | None = None) -> tuple[ParamStore, dict, dict]:
    raw = Path(path).read_bytes()
    end = raw.find(b"\nEND\n")
    if end < 0:
        raise CheckpointError("checkpoint header is not terminated")
    try:
        lines = raw[:end].decode("utf-8").split("\n")
    except UnicodeDecodeError:
        raise CheckpointError("checkpoint header is not UTF-8") from None
    body = raw[end + len(b"\nEND\n"):]
    first = lines[0].split()
    if len(first) != 2 or first[0] != _MAGIC:
        raise CheckpointError("not an ISE checkpoint")
    if first[1] != str(CHECKPOINT_VERSION):
        raise CheckpointError(f"checkpoint version {first[1]} != {CHECKPOINT_VERSION}")
    config: dict | None = None
    extra: dict = {}
    ps = ParamStore()
    total = len(body) // 8
    if len(body) % 8:
        raise CheckpointError("truncated payload")
    for line in lines[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "config":
            config = json.loads(rest)
        elif kind == "extra":
            extra = json.loads(rest)
        elif kind == "param":
            try:
                name, shape_s, off_s = rest.split(" ")
                shape = tuple(int(n) for n in shape_s.split(",")) if shape_s else ()
                off = int(off_s)
            except ValueError:
                raise CheckpointError(f"bad manifest line {line!r}") from None
            size = int(np.prod(shape)) if shape else 1
            if off + size > total:
                raise CheckpointError("truncated payload")
            data = np.frombuffer(body, dtype="<f8", count=size, offset=off * 8).reshape(shape)
            ps.add(name, data.astype(np.float64))
        else:
            raise CheckpointError(f"bad manifest line {line!r}")
    if config is None:
        raise CheckpointError("checkpoint header lacks a config line")
    if expected_config is not None and expected_config != config:
        raise CheckpointError("checkpoint config does not match the expected model config")
    return ps, config, extra
