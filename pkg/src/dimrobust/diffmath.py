"""Dense float64 tensors with tape-based reverse-mode differentiation.

Usage::

    W = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = (W * W).sum()
    tape.backward(loss)
    W.grad  # 2 * W

Operations executed while a tape is active and at least one operand
requires a gradient are appended to that tape.  Outside a tape every
operation is a plain numpy evaluation, which is what inference and the
attack's verification passes use.
"""

from __future__ import annotations

import threading
import weakref
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DomainError, NumericError, UsageError

__all__ = [
    "Tensor",
    "Tape",
    "AdamState",
    "Adam",
    "adam_step",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "tanh",
    "sigmoid",
    "softmax",
    "log",
    "exp",
    "abs",
    "sum",
    "mean",
    "concatenate",
    "getitem",
    "clamp",
    "transpose",
    "reshape",
    "cross_entropy",
]

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: weakref.ref | None = None  # weak, so finished tapes are freed without the cycle collector

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> Tensor:
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager.  Nested tapes are allowed; operations go to
    the innermost one.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Backward]] = []
        self._ref = weakref.ref(self)

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], rule: Backward) -> None:
        out.requires_grad = True
        out._tape = self._ref
        self.records.append((out, inputs, rule))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
        if loss.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is None:
            if loss.requires_grad:
                _accumulate_leaf(loss, np.ones_like(loss.data))
            return
        if loss._tape is not self._ref:
            raise UsageError("loss was not recorded on this tape")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owned: set[int] = set()  # buffers allocated here, safe to update in place
        for out, inputs, rule in reversed(self.records):
            key_out = id(out)
            g = pending.pop(key_out, None)
            owned.discard(key_out)
            if g is None:
                continue
            for inp, gi in zip(inputs, rule(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is None:
                    _accumulate_leaf(inp, gi)
                    continue
                key = id(inp)
                prev = pending.get(key)
                if isinstance(gi, _IndexedGrad):
                    if key not in owned:
                        buf = np.zeros(inp.shape) if prev is None else np.array(prev, dtype=np.float64)
                        pending[key] = buf
                        owned.add(key)
                    gi.add_into(pending[key])
                elif prev is None:
                    pending[key] = gi
                elif key in owned:
                    prev += gi
                else:
                    pending[key] = prev + gi
                    owned.add(key)


class _IndexedGrad:
    """Gradient that is nonzero only at ``idx`` of the input; scattered lazily."""

    __slots__ = ("idx", "g", "basic")

    def __init__(self, idx, g: np.ndarray, basic: bool):
        self.idx = idx
        self.g = g
        self.basic = basic

    def add_into(self, buf: np.ndarray) -> None:
        if self.basic:
            buf[self.idx] += self.g
        else:
            np.add.at(buf, self.idx, self.g)

    def dense(self, shape) -> np.ndarray:
        buf = np.zeros(shape)
        self.add_into(buf)
        return buf


def _accumulate_leaf(t: Tensor, g) -> None:
    if isinstance(g, _IndexedGrad):
        g = g.dense(t.shape)
    g = np.broadcast_to(g, t.shape)
    t.grad = np.array(g, dtype=np.float64) if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Backpropagate through whatever tape produced ``loss``."""
    if loss._tape is None:
        if loss.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss.requires_grad:
            _accumulate_leaf(loss, np.ones_like(loss.data))
        return
    tape = loss._tape()
    if tape is None:
        raise UsageError("the tape that recorded this tensor no longer exists")
    tape.backward(loss)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], rule: Backward) -> Tensor:
    out = Tensor._wrap(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, rule)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _bshape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _bshape(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _bshape(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _bshape(a, b, "mul")

    def rule(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), rule)


def neg(a) -> Tensor:
    a = _t(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ConfigError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def rule(g):
        ga = gb = None
        if a.ndim == 1:
            ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
            gb = np.outer(a.data, g) if b.requires_grad else None
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), rule)


def transpose(a) -> Tensor:
    a = _t(a)
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape) -> Tensor:
    a = _t(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


# nonlinearities


def tanh(a) -> Tensor:
    a = _t(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = _t(a)
    y = _sigmoid(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = _t(a)
    y = _softmax(a.data)

    def rule(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), rule)


def log(a) -> Tensor:
    a = _t(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = _t(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def abs(a) -> Tensor:  # noqa: A001
    a = _t(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clamp(a, lo: float | np.ndarray | None = None, hi: float | np.ndarray | None = None) -> Tensor:
    """Clip into [lo, hi]; the gradient is zero wherever the clip is active."""
    a = _t(a)
    x = a.data
    y = np.clip(x, lo, hi) if (lo is not None or hi is not None) else x.copy()
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x > lo
    if hi is not None:
        inside &= x < hi
    return _make(y, (a,), lambda g: (g * inside,))


# reductions and structure


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _t(a)
    y = np.sum(a.data, axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(y, dtype=np.float64), (a,), rule)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concatenate(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_t(t) for t in tensors)
    try:
        y = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ConfigError(f"concatenate: {exc}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def rule(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts))
        )

    return _make(y, ts, rule)


def getitem(a, idx) -> Tensor:
    """Basic slicing or integer-array indexing."""
    a = _t(a)
    y = a.data[idx]
    basic = not _has_array_index(idx)

    def rule(g):
        return (_IndexedGrad(idx, g, basic),)

    return _make(np.array(y, dtype=np.float64), (a,), rule)


def _has_array_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def cross_entropy(logits, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over the batch."""
    logits = _t(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ConfigError(f"cross_entropy: logits {logits.shape} vs {labels.shape[0]} labels")
    n_cls = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise ConfigError(f"cross_entropy: labels must lie in [0, {n_cls})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(labels.size)
    loss = float(np.mean(lse - z[rows, labels]))
    batch = labels.size

    def rule(g):
        p = _softmax(logits.data)
        p[rows, labels] -= 1.0
        return (p * (g / batch),)

    return _make(np.array(loss), (logits,), rule)


# optimisation


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float | np.ndarray = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arr: np.ndarray, **kw) -> AdamState:
        return cls(m=np.zeros_like(arr, dtype=np.float64), v=np.zeros_like(arr, dtype=np.float64), **kw)


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if params.shape != grad.shape or state.m.shape != params.shape or state.v.shape != params.shape:
        raise ConfigError(
            f"adam_step: shapes differ, params {params.shape}, grad {grad.shape}, "
            f"m {state.m.shape}, v {state.v.shape}"
        )
    if not np.all(np.isfinite(grad)):
        bad = int(np.count_nonzero(~np.isfinite(grad)))
        raise NumericError(f"adam_step: {bad} non-finite gradient entries, step aborted")
    b1, b2 = state.beta1, state.beta2
    state.t += 1
    state.m *= b1
    state.m += (1.0 - b1) * grad
    state.v *= b2
    state.v += (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1**state.t)
    v_hat = state.v / (1.0 - b2**state.t)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


@dataclass
class Adam:
    """Adam over a list of leaf tensors, reading their ``.grad``."""

    params: list[Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: list[AdamState] = field(init=False)

    def __post_init__(self):
        self.states = [
            AdamState.zeros_like(p.data, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)
            for p in self.params
        ]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        # validate everything first so a bad gradient leaves all params untouched
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise NumericError("Adam.step: non-finite gradient, step aborted")
        for p, g, s in zip(self.params, grads, self.states):
            adam_step(p.data, g, s)
