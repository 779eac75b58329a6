"""Small dense reverse-mode differentiation engine.

Only the operations the recommender needs are provided. Every forward op
records a node on the active :class:`Tape`; :func:`backward` replays the tape
in reverse. Arrays may carry leading batch axes; ``matmul`` follows
``np.matmul`` broadcasting and gradients are summed back to each input shape.

Precision is a global setting: ``"float64"`` (check mode) or ``"float32"``
(fast mode).
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

_PRECISIONS = {"float64": np.float64, "float32": np.float32, "check": np.float64, "fast": np.float32}

_state = {
    "dtype": np.float64,
    "debug": os.environ.get("MAGNN_DEBUG", "0") not in ("0", "", "false"),
}
_tapes: list["Tape"] = []


class NonFiniteError(FloatingPointError):
    pass


def set_precision(mode: str) -> None:
    try:
        _state["dtype"] = _PRECISIONS[mode]
    except KeyError:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(_PRECISIONS)}") from None


def get_dtype():
    return _state["dtype"]


def precision_name() -> str:
    return "float64" if _state["dtype"] is np.float64 else "float32"


@contextlib.contextmanager
def precision(mode: str):
    old = _state["dtype"]
    set_precision(mode)
    try:
        yield
    finally:
        _state["dtype"] = old


def set_debug(flag: bool) -> None:
    _state["debug"] = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, np.ndarray) and data.dtype == _state["dtype"]:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_state["dtype"])
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def param(data, name: str) -> Tensor:
    """Parameter leaf; shares memory with ``data`` when dtypes agree."""
    return Tensor(data, requires_grad=True, name=name)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple, backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Records operation nodes in execution order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def records(self, t: Tensor) -> bool:
        return id(t) in self._outputs

    def _push(self, node: _Node) -> None:
        self.nodes.append(node)
        self._outputs.add(id(node.out))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    if _state["debug"] and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced (shape {data.shape})")
    tape = _tapes[-1] if _tapes else None
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape._push(_Node(out, parents, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(a.data * b.data, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    def back(g):
        return (g * c,)

    return _emit(a.data * c, (a,), back)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def back(g):
        return (g * (1.0 - y * y),)

    return _emit(y, (a,), back)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)

    def back(g):
        return (g * y * (1.0 - y),)

    return _emit(y, (a,), back)


def log_sigmoid(a: Tensor) -> Tensor:
    """``log(sigmoid(a))`` computed without overflow."""
    x = a.data
    y = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))

    def back(g):
        return (g * _sigmoid(-x),)

    return _emit(y, (a,), back)


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul expects operands with at least two axes")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(a.data @ b.data, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    def back(g):
        return (np.swapaxes(g, -1, -2),)

    return _emit(np.swapaxes(a.data, -1, -2), (a,), back)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    """Join along ``axis``; the backward pass splits the upstream gradient."""
    parts = tuple(_as_tensor(p) for p in parts)
    rest = [tuple(np.delete(np.array(p.shape), axis)) for p in parts]
    if any(s != rest[0] for s in rest):
        raise ValueError(f"concat shape mismatch: {[p.shape for p in parts]}")
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit(np.concatenate([p.data for p in parts], axis=axis), parts, back)


def outer_broadcast(v: Tensor, count: int) -> Tensor:
    """Repeat ``v`` (..., d) ``count`` times along a new axis -> (..., count, d)."""
    out = np.broadcast_to(v.data[..., None, :], v.shape[:-1] + (count, v.shape[-1])).copy()

    def back(g):
        return (g.sum(axis=-2),)

    return _emit(out, (v,), back)


def gather_rows(table: Tensor, idx) -> Tensor:
    """``table[idx]`` for a 2-D table; duplicate indices accumulate in backward."""
    idx = np.asarray(idx, dtype=np.int64)
    n_rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise IndexError(f"row index out of range for table with {n_rows} rows")

    def back(g):
        grad = np.zeros_like(table.data)
        _kernels.scatter_add_rows(grad, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _emit(table.data[idx], (table,), back)


def sparse_aggregate(indptr, indices, weights, rows, table: Tensor) -> Tensor:
    """``out[..., :] = sum_k w[row, k] * table[k]`` with fixed CSR weights."""
    rows = np.asarray(rows, dtype=np.int64)
    flat = rows.reshape(-1)
    out = _kernels.csr_aggregate(indptr, indices, weights, flat, table.data)

    def back(g):
        grad = np.zeros_like(table.data)
        _kernels.csr_aggregate_backward(
            indptr, indices, weights, flat, g.reshape(-1, table.shape[1]), grad
        )
        return (grad,)

    return _emit(out.reshape(rows.shape + (table.shape[1],)), (table,), back)


# ---------------------------------------------------------------------------
# reductions and normalisers
# ---------------------------------------------------------------------------


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    if axis is None:
        def back(g):
            return (np.broadcast_to(g, a.shape).copy(),)

        return _emit(np.asarray(a.data.sum()), (a,), back)

    def back_axis(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _emit(a.data.sum(axis=axis), (a,), back_axis)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def sum_squares(a: Tensor) -> Tensor:
    def back(g):
        return (2.0 * g * a.data,)

    return _emit(np.asarray(np.vdot(a.data, a.data)), (a,), back)


def mean_masked(x: Tensor, mask) -> Tensor:
    """Mean over axis -2 of ``x`` (..., n, d) using only rows where ``mask`` is true."""
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=-1)
    if np.any(counts == 0):
        raise ValueError("mean_masked: every mask row needs at least one true entry")
    w = (mask / counts[..., None]).astype(x.data.dtype)[..., None]

    def back(g):
        return (g[..., None, :] * w,)

    return _emit((x.data * w).sum(axis=-2), (x,), back)


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Max-subtracted softmax along ``axis``.

    Masked-out entries get probability zero; a slice with no valid entry
    comes out as all zeros.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    top = np.max(z, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    ex = np.exp(z - top)
    denom = ex.sum(axis=axis, keepdims=True)
    y = ex / np.where(denom > 0, denom, 1.0)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit(y, (x,), back)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of scalar ``loss`` for every parameter leaf.

    Returns a dict keyed by leaf name. When ``params`` is given, leaves that
    never reached the loss get zero gradients so the result covers them all.
    """
    if not tape.records(loss):
        raise ValueError("loss was not produced on this tape")
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if not tape.records(parent):
                leaves[key] = parent
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = {}
    for key, leaf in leaves.items():
        if leaf.name is None:
            continue
        out[leaf.name] = grads[key]
    if params is not None:
        for p in params:
            if p.name not in out:
                out[p.name] = np.zeros_like(p.data)
    return out
