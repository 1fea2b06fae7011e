"""
Reverse-mode differentiation over dense numpy arrays.

A Tensor wraps a row-major ndarray plus the closure that maps the gradient of
its output back onto its parents. Graphs are only recorded when at least one
input requires a gradient and recording is enabled for the current thread.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from mmfusion.errors import NumericError, ShapeError

PRECISIONS = {"f32": np.float32, "f64": np.float64}

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording a graph (forward-only commands, oracles)."""
    previous = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(PRECISIONS[precision])
        except KeyError:
            from mmfusion.errors import ConfigError

            raise ConfigError(f"unknown precision {precision!r}; expected f32 or f64")
    return np.dtype(precision)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype=None,
    ):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    # --- convenience ---
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name}" if self.name else ""
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype}{req}{nm})"

    # --- autograd core ---
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() needs an explicit gradient for dims {self.dims}"
                )
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate into the gradient slot
                if node.grad is None:
                    node.grad = np.array(g, dtype=node.data.dtype)
                else:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # --- operators ---
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


# ---------------------------
# Helpers
# ---------------------------


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x))
    return Tensor(x, dtype=dtype)


def _lift(a, b) -> tuple[Tensor, Tensor]:
    """Python scalars and arrays adopt the dtype of the tensor operand."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    return as_tensor(a), as_tensor(b)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def check_finite(t: Tensor, what: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {what}")
    return t


# ---------------------------
# Elementwise
# ---------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), backward)


def power(a: Tensor, p: float) -> Tensor:
    def backward(g):
        return (g * p * np.power(a.data, p - 1),)

    return _make(np.power(a.data, p), (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out = (0.5 * (1.0 + np.tanh(0.5 * a.data))).astype(a.data.dtype)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), backward)


def log_sigmoid(a: Tensor) -> Tensor:
    out = -np.logaddexp(0.0, -a.data).astype(a.data.dtype)

    def backward(g):
        # d/dx log(sigmoid(x)) = sigmoid(-x)
        return (g * (0.5 * (1.0 - np.tanh(0.5 * a.data))),)

    return _make(out, (a,), backward)


def smooth_l1(a: Tensor, beta: float) -> Tensor:
    absx = np.abs(a.data)
    quad = absx < beta
    out = np.where(quad, 0.5 * a.data * a.data / beta, absx - 0.5 * beta)

    def backward(g):
        return (g * np.where(quad, a.data / beta, np.sign(a.data)),)

    return _make(out.astype(a.data.dtype), (a,), backward)


# ---------------------------
# Reductions and movement
# ---------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / max(count, 1))


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inverse = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return _make(np.transpose(a.data, axes), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), backward)


# ---------------------------
# Linear algebra
# ---------------------------


def matmul(a, b) -> Tensor:
    a, b = _lift(a, b)
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul mismatch: left dims {a.dims}, right dims {b.dims}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax received non-finite input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward)


# ---------------------------
# Spatial
# ---------------------------


def separable_map(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """out[c] = rows @ x[c] @ cols.T; shared by pooling and resizing."""
    rows = rows.astype(x.data.dtype, copy=False)
    cols = cols.astype(x.data.dtype, copy=False)
    out = np.matmul(np.matmul(rows, x.data), cols.T)

    def backward(g):
        return (np.matmul(np.matmul(rows.T, g), cols),)

    return _make(out, (x,), backward)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1, padding: int = 0) -> Tensor:
    """Single-frame convolution: x C×H×W, weight O×C×k×k, bias O → O×H'×W'."""
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects C×H×W and O×C×k×k, got {x.dims} and {weight.dims}")
    c_in, h, w = x.shape
    c_out, c_w, kh, kw = weight.shape
    if c_w != c_in:
        raise ShapeError(f"conv2d channel mismatch: input dims {x.dims}, weight dims {weight.dims}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d output would be empty for input dims {x.dims}")
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride][:, :h_out, :w_out]  # C×H'×W'×kh×kw
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(c_in * kh * kw, h_out * w_out)
    wmat = weight.data.reshape(c_out, -1)
    out = (wmat @ cols).reshape(c_out, h_out, w_out)
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data[:, None, None]
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(c_out, -1)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gcols = (wmat.T @ g2).reshape(c_in, kh, kw, h_out, w_out)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += gcols[:, i, j]
        gx = gxp[:, padding : padding + h, padding : padding + w]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    return _make(out, parents, backward)


def scatter_max(features: Tensor, cells: np.ndarray, n_cells: int) -> Tensor:
    """
    Row-wise maximum of ``features`` grouped by ``cells`` into an n_cells×C table.

    Cells no row maps to stay zero. The gradient of each (cell, channel) flows
    to the lowest-indexed row holding the maximum.
    """
    cells = np.asarray(cells, dtype=np.int64)
    k, c = features.shape
    dtype = features.data.dtype
    table = np.full((n_cells, c), -np.inf, dtype=dtype)
    if k:
        np.maximum.at(table, cells, features.data)
    touched = np.isfinite(table)
    out = np.where(touched, table, 0).astype(dtype)

    def backward(g):
        hit = features.data == out[cells]
        rows, chans = np.nonzero(hit)
        winner = np.full((n_cells, c), k, dtype=np.int64)
        np.minimum.at(winner, (cells[rows], chans), rows)
        chosen = winner[cells, :] == np.arange(k)[:, None]
        return (np.where(chosen, g[cells], 0).astype(dtype),)

    return _make(out, (features,), backward)


def stack_losses(values: Iterable[Tensor]) -> Tensor:
    values = list(values)
    total = values[0]
    for v in values[1:]:
        total = add(total, v)
    return total
