"""Dense f64 tensors with tape-based reverse-mode differentiation.

Every primitive applied while gradients are enabled appends one entry to the
current thread's tape.  ``backward`` walks the tape in reverse and then
clears it; gradients accumulate additively in ``Tensor.grad``.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_local = threading.local()


def _tape() -> list:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = []
    return tape


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


def clear_tape() -> None:
    _tape().clear()


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other: float):
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    if grad_enabled():
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                _tape().append((out, parents, backward))
                break
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    tape = _tape()
    loss.grad = np.ones_like(loss.data)
    for out, parents, fn in reversed(tape):
        g = out.grad
        if g is None:
            continue
        for p, pg in zip(parents, fn(g)):
            if pg is None or not p.requires_grad:
                continue
            p.grad = pg if p.grad is None else p.grad + pg
        out.grad = None
    loss.grad = None
    tape.clear()


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _record(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return _record(ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``."""
    xd, wd = x.data, w.data
    if xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"linear: input {xd.shape} vs weight {wd.shape}")
    out = xd @ wd
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = g @ wd.T if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return _record(out, parents, bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(x.data * mask, (x,), lambda g: (g * mask,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    mask = x.data > floor
    return _record(np.where(mask, x.data, floor), (x,), lambda g: (g * mask,))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def index(x: Tensor, idx) -> Tensor:
    shape = x.shape
    basic = isinstance(idx, (int, slice)) or (
        isinstance(idx, tuple) and all(isinstance(i, (int, slice)) for i in idx)
    )

    def bw(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _record(x.data[idx], (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_lift(x) for x in xs]
    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _record(data, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)))


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


def tmax(x: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximizer."""
    xd = x.data
    arg = np.argmax(xd, axis=axis)
    out = np.take_along_axis(xd, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def bw(g):
        grad = np.zeros_like(xd)
        np.put_along_axis(grad, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# neural primitives


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax with an optional additive mask (``-inf`` removes an entry)."""
    z = x.data if mask is None else x.data + mask
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _record(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def attention_weights(q: Tensor, k: Tensor, mask: np.ndarray | None = None, scale: float | None = None) -> Tensor:
    """``softmax(q k^T * scale + mask)`` over the last axis; q (..., Lq, d), k (..., Lk, d)."""
    qd, kd = q.data, k.data
    if qd.shape[-1] != kd.shape[-1]:
        raise ShapeError(f"attention: query {qd.shape} vs key {kd.shape}")
    if scale is None:
        scale = qd.shape[-1] ** -0.5
    z = (qd @ np.swapaxes(kd, -1, -2)) * scale
    if mask is not None:
        z = z + mask
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        gz = y * (g - (g * y).sum(axis=-1, keepdims=True)) * scale
        gq = gz @ kd if q.requires_grad else None
        gk = np.swapaxes(gz, -1, -2) @ qd if k.requires_grad else None
        return (
            None if gq is None else _unbroadcast(gq, qd.shape),
            None if gk is None else _unbroadcast(gk, kd.shape),
        )

    return _record(y, (q, k), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    flat = np.ptp(xd, axis=-1, keepdims=True) == 0
    if flat.any():
        # constant rows normalize to exactly zero
        xc = np.where(flat, 0.0, xc)
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out, (x, gain, bias), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    if not train or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record(x.data * keep, (x,), lambda g: (g * keep,))


def embedding(table: Tensor, indices: Sequence[int] | np.ndarray) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    shape = table.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record(table.data[idx], (table,), bw)


# ---------------------------------------------------------------------------
# verification


def grad_check(fn: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    ``fn`` must be deterministic and return a scalar built from ``params``.
    """
    params = list(params)
    for p in params:
        p.grad = None
    clear_tape()
    backward(fn())
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = fn().item()
                flat[i] = orig - h
                fm = fn().item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
