"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

Everything is 64-bit and shape-explicit: binary ops require identical shapes,
and the only implicit broadcasting is tensor-scalar. Row/column variants
(add_rows, add_cols, mul_cols) cover the mixed-shape cases with auditable
backward rules. Reductions run in numpy's fixed sequential order, so repeated
runs with the same inputs are bit-identical.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class TensorError(RuntimeError):
    """Raised on invalid tape / gradient usage."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars mean python numbers, everything else must be
    # a same-shaped Tensor
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


class _Node:
    __slots__ = ("outs", "backward")

    def __init__(self, outs: Sequence[Tensor], backward: Callable[[], None]):
        self.outs = tuple(outs)
        self.backward = backward


class Tape:
    """Ordered record of primitive ops, replayed backward for gradients.

    A tape is confined to one logical thread. ``marker``/``pop_to`` let the
    flow integrator drop recorded segments (the checkpointing hook).
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.retained_floats = 0

    def record(self, outs: Sequence[Tensor], backward: Callable[[], None]):
        self.nodes.append(_Node(outs, backward))
        self.retained_floats += sum(o.data.size for o in outs)

    def marker(self) -> int:
        return len(self.nodes)

    def pop_to(self, marker: int):
        for node in self.nodes[marker:]:
            self.retained_floats -= sum(o.data.size for o in node.outs)
        del self.nodes[marker:]

    def clear(self):
        self.nodes.clear()
        self.retained_floats = 0

    def __enter__(self):
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False


class _ThreadState(threading.local):
    def __init__(self):
        self.stack = [Tape()]
        self.grad_enabled = True


_state = _ThreadState()


def current_tape() -> Tape:
    return _state.stack[-1]


def reset_tape():
    current_tape().clear()


class no_grad:
    """Context manager disabling tape recording."""

    def __enter__(self):
        self._prev = _state.grad_enabled
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def _record(out: Tensor, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]):
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True

        def run():
            if out.grad is not None:
                backward(out.grad)

        current_tape().record((out,), run)
    return out


def record_multi(outs: Sequence[Tensor], parents: Sequence[Tensor], backward: Callable[[], None]):
    """Record a node with several outputs (used by the flow integrator)."""
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        for o in outs:
            o.requires_grad = True
        current_tape().record(outs, backward)
    return outs


def grad_enabled() -> bool:
    return _state.grad_enabled


def backward(loss: Tensor):
    """Backpropagate from a scalar loss through the current tape."""
    if loss.data.shape != ():
        raise TensorError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    tape = current_tape()
    if not tape.nodes:
        raise TensorError("backward on an empty tape")
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(tape.nodes):
        if any(o.grad is not None for o in node.outs):
            node.backward()


# ---------------------------------------------------------------------------
# primitive operations


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not match")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _record(out, (a, b), bwd)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)

    def bwd(g):
        a.accumulate_grad(g * c)

    return _record(out, (a,), bwd)


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data + float(c))

    def bwd(g):
        a.accumulate_grad(g)

    return _record(out, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} do not conform")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _record(out, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected rank 2, got shape {a.data.shape}")
    out = Tensor(a.data.T.copy())

    def bwd(g):
        a.accumulate_grad(g.T)

    return _record(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))

    def bwd(g):
        a.accumulate_grad(g * out.data)

    return _record(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))

    def bwd(g):
        a.accumulate_grad(g / a.data)

    return _record(out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))

    def bwd(g):
        a.accumulate_grad(g * (a.data > 0.0))

    return _record(out, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data))

    def bwd(g):
        a.accumulate_grad(g * (1.0 - out.data * out.data))

    return _record(out, (a,), bwd)


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(a.data.sum(axis=axis))

    def bwd(g):
        if axis is None:
            a.accumulate_grad(np.full_like(a.data, float(g)))
        else:
            a.accumulate_grad(np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return _record(out, (a,), bwd)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(a.data.mean())

    def bwd(g):
        a.accumulate_grad(np.full_like(a.data, float(g) / n))

    return _record(out, (a,), bwd)


def squared_norm(a: Tensor) -> Tensor:
    out = Tensor(np.sum(a.data * a.data))

    def bwd(g):
        a.accumulate_grad(2.0 * float(g) * a.data)

    return _record(out, (a,), bwd)


def logsumexp(a: Tensor, axis: int | None = None) -> Tensor:
    """log sum exp with max-subtraction; stable for magnitudes up to ~1e4."""
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(a.data - m).sum(axis=axis, keepdims=True)
    val = np.log(s) + m
    if axis is None:
        out = Tensor(val.reshape(()))
    else:
        out = Tensor(np.squeeze(val, axis=axis))

    def bwd(g):
        soft = np.exp(a.data - val)  # softmax weights
        if axis is None:
            a.accumulate_grad(float(g) * soft)
        else:
            a.accumulate_grad(np.expand_dims(g, axis) * soft)

    return _record(out, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return _record(out, tuple(tensors), bwd)


def slice_(a: Tensor, key) -> Tensor:
    out = Tensor(a.data[key].copy())

    def bwd(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, key, g)
        a.accumulate_grad(buf)

    return _record(out, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape).copy())

    def bwd(g):
        a.accumulate_grad(g.reshape(a.data.shape))

    return _record(out, (a,), bwd)


def add_rows(m: Tensor, v: Tensor) -> Tensor:
    """Add a length-n vector to every row of an (m, n) matrix."""
    if m.data.ndim != 2 or v.data.shape != (m.data.shape[1],):
        raise ShapeError(f"add_rows: shapes {m.data.shape} and {v.data.shape} do not conform")
    out = Tensor(m.data + v.data[None, :])

    def bwd(g):
        if m.requires_grad:
            m.accumulate_grad(g)
        if v.requires_grad:
            v.accumulate_grad(g.sum(axis=0))

    return _record(out, (m, v), bwd)


def add_cols(m: Tensor, u: Tensor) -> Tensor:
    """Add a length-m vector to every column of an (m, n) matrix."""
    if m.data.ndim != 2 or u.data.shape != (m.data.shape[0],):
        raise ShapeError(f"add_cols: shapes {m.data.shape} and {u.data.shape} do not conform")
    out = Tensor(m.data + u.data[:, None])

    def bwd(g):
        if m.requires_grad:
            m.accumulate_grad(g)
        if u.requires_grad:
            u.accumulate_grad(g.sum(axis=1))

    return _record(out, (m, u), bwd)


def mul_cols(m: Tensor, u: Tensor) -> Tensor:
    """Scale row i of an (m, n) matrix by u[i]."""
    if m.data.ndim != 2 or u.data.shape != (m.data.shape[0],):
        raise ShapeError(f"mul_cols: shapes {m.data.shape} and {u.data.shape} do not conform")
    out = Tensor(m.data * u.data[:, None])

    def bwd(g):
        if m.requires_grad:
            m.accumulate_grad(g * u.data[:, None])
        if u.requires_grad:
            u.accumulate_grad((g * m.data).sum(axis=1))

    return _record(out, (m, u), bwd)


def select_index(a: Tensor, idx: np.ndarray, axis: int) -> Tensor:
    """Pick one entry along `axis` per position of the other axis.

    axis=1: out[i] = a[i, idx[i]]; axis=0: out[j] = a[idx[j], j].
    idx is a constant integer array, gradients flow into `a` only.
    """
    if a.data.ndim != 2:
        raise ShapeError(f"select_index: expected rank 2, got shape {a.data.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    if axis == 1:
        if idx.shape != (a.data.shape[0],):
            raise ShapeError(f"select_index: index shape {idx.shape} vs data {a.data.shape}")
        rows = np.arange(a.data.shape[0])
        out = Tensor(a.data[rows, idx])

        def bwd(g):
            buf = np.zeros_like(a.data)
            np.add.at(buf, (rows, idx), g)
            a.accumulate_grad(buf)

    elif axis == 0:
        if idx.shape != (a.data.shape[1],):
            raise ShapeError(f"select_index: index shape {idx.shape} vs data {a.data.shape}")
        cols = np.arange(a.data.shape[1])
        out = Tensor(a.data[idx, cols])

        def bwd(g):
            buf = np.zeros_like(a.data)
            np.add.at(buf, (idx, cols), g)
            a.accumulate_grad(buf)

    else:
        raise ShapeError(f"select_index: axis must be 0 or 1, got {axis}")
    return _record(out, (a,), bwd)
