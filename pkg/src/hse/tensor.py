"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable primitive in this
module records its inputs and a backward closure on the output tensor, so the
graph behind any result can be recovered by a topological sort
(:func:`build_graph`) and walked in reverse (:func:`backward`).
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "GraphError", "NumericError", "no_grad", "is_grad_enabled",
    "build_graph", "backward",
    "add", "sub", "mul", "div", "neg", "power", "matmul", "linear", "conv2d",
    "avg_pool2d", "global_avg_pool", "relu", "tanh", "activation", "exp", "log",
    "sum", "mean", "reshape", "transpose", "concat", "broadcast_to",
    "softmax", "log_softmax", "take", "index_select", "detach",
]

_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_state = threading.local()


class GraphError(RuntimeError):
    """Raised on a malformed backward request."""


class NumericError(ArithmeticError):
    """Raised when a tensor holds NaN or Inf."""


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Context in which results are computed without recording a graph."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in _DTYPES else np.float64
    dtype = np.dtype(dtype)
    if dtype not in _DTYPES:
        raise TypeError(f"unsupported dtype {dtype}; expected float32 or float64")
    return np.array(arr, dtype=dtype)


class Tensor:
    """N-dimensional array of reals with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) and dtype is None and data.dtype in _DTYPES \
            else _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def check_finite(self) -> "Tensor":
        if not self.is_finite():
            raise NumericError(f"tensor {self.name or self.op} of shape {self.shape} holds NaN/Inf")
        return self

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=None)

    def backward(self, seed=None) -> None:
        backward(self, seed)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)
    __matmul__ = lambda self, other: matmul(self, other)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype if like is not None else np.float64))


def _make(data: np.ndarray, parents: Iterable[Tensor], fn, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- graph traversal ---------------------------------------------------------

def build_graph(output: Tensor) -> list[Tensor]:
    """Return the nodes feeding ``output`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
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
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(output: Tensor, seed=None) -> None:
    """Accumulate d(sum(seed * output))/d(leaf) into every requiring leaf's ``grad``.

    ``seed`` defaults to ones for a single-element output. Gradients add onto any
    existing ``grad`` buffer, so call :meth:`Tensor.zero_grad` between steps.
    """
    if not output.requires_grad:
        raise GraphError("output does not require grad; nothing was recorded by a forward pass")
    if seed is None:
        if output.data.size != 1:
            raise GraphError(f"seed required for non-scalar output of shape {output.shape}")
        seed = np.ones_like(output.data)
    seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=output.dtype)
    if seed.shape != output.shape:
        raise GraphError(f"seed shape {seed.shape} does not match output shape {output.shape}")

    grads: dict[int, np.ndarray] = {id(output): seed}
    for node in reversed(build_graph(output)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient 0 at exactly 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "tanh":
        return tanh(a)
    raise ValueError(f"unknown activation {kind!r}")


def detach(a: Tensor) -> Tensor:
    return a.detach()


# -- reductions and shape ----------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inverse),), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def take(a: Tensor, index: np.ndarray) -> Tensor:
    """Pick ``a[n, index[n]]`` for every row of a 2-D tensor."""
    index = np.asarray(index, dtype=np.intp)
    rows = np.arange(a.shape[0])

    def fn(g):
        full = np.zeros_like(a.data)
        full[rows, index] = g
        return (full,)

    return _make(a.data[rows, index], (a,), fn, "take")


def index_select(a: Tensor, index: np.ndarray, axis: int = -1) -> Tensor:
    """Gather entries of ``a`` along ``axis``; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.intp)
    axis = axis % a.ndim

    def fn(g):
        full = np.zeros_like(a.data)
        np.add.at(np.moveaxis(full, axis, -1), (..., index), np.moveaxis(g, axis, -1))
        return (full,)

    return _make(np.take(a.data, index, axis=axis), (a,), fn, "index_select")


# -- softmax family ----------------------------------------------------------

def softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def log_softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = softmax_array(a.data, axis)
    return _make(out, (a,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = log_softmax_array(a.data, axis)

    def fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), fn, "log_softmax")


# -- dense layers ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape [N, D_in] and ``weight`` [D_out, D_in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear dimension mismatch: input {x.shape}, weight {weight.shape}")
    out = x.data @ weight.data.T
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear bias shape {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        parents = (x, weight, bias)

    def fn(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _make(out, parents, fn, "linear")


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation over [N, C_in, H, W] with a square [C_out, C_in, k, k] kernel."""
    if x.ndim != 4:
        raise ValueError(f"conv2d expects a 4-D input, got shape {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d expects a square 4-D kernel, got shape {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, wc, k, _ = weight.shape
    if wc != c_in:
        raise ValueError(f"conv2d channel mismatch: input has {c_in}, kernel expects {wc}")
    if stride < 1:
        raise ValueError("conv2d stride must be >= 1")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ValueError(f"conv2d kernel {k} exceeds padded input {h + 2 * pad}x{w + 2 * pad}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match {c_out} output channels")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = _windows(xp, k, stride)  # [N, C, Ho, Wo, k, k] view
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_in * k * k)
    wmat = weight.data.reshape(c_out, c_in * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, c_in, k, k)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _make(out, parents, fn, "conv2d")


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size`` x ``size`` average pooling; trailing rows/cols are dropped."""
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise ValueError(f"avg_pool2d window {size} larger than input {h}x{w}")
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(size):
        for j in range(size):
            out += x.data[:, :, i:ho * size:size, j:wo * size:size]
    out *= 1.0 / (size * size)

    def fn(g):
        full = np.zeros_like(x.data)
        share = g * (1.0 / (size * size))
        for i in range(size):
            for j in range(size):
                full[:, :, i:ho * size:size, j:wo * size:size] = share
        return (full,)

    return _make(out, (x,), fn, "avg_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two spatial axes of [N, C, H, W]."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects a 4-D input, got shape {x.shape}")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3))
    return _make(out, (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),), "gap")
