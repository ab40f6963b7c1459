"""
Reverse-Mode Automatic Differentiation

A compact tensor library over float64 numpy arrays. Every op records its
parents and a closure that pushes the upstream gradient into them; calling
`backward()` on a scalar builds a `ComputationGraph` (a networkx DiGraph of the
tensors that require gradients) and walks it in reverse topological order.

Conventions:
- Gradients accumulate across uses of a tensor; zero them between steps.
- Binary ops follow numpy broadcasting and reduce gradients back to each
  operand's shape.
- `softmax` subtracts the row max, `log` clamps its input at 1e-12.
- `gradient_reverse` is the identity forward and negates the gradient backward.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import networkx as nx
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.errors import ShapeError


LOG_CLAMP = 1e-12

_node_ids = itertools.count()
_state = threading.local()


# === Grad mode ===

def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


# === Tensor ===

class Tensor:
    """
    n-dimensional float64 value with optional gradient tracking.

    Parameters
    ----------
    data : array_like
        Values; copied into a contiguous float64 buffer.
    requires_grad : bool, optional
        If True, `grad` is allocated (zeros, same shape) and gradients are
        accumulated into it during backward passes. Default is False.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], None] | None = None
        self.id = next(_node_ids)

    # --- introspection ---

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="only single-element tensors convert to float")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """
        Back-propagate from this tensor.

        Parameters
        ----------
        grad : np.ndarray, optional
            Upstream gradient. May be omitted only for single-element tensors,
            in which case it is 1.
        """
        if not self.requires_grad:
            return
        if grad is None:
            if self.size != 1:
                raise ShapeError("backward", self.shape, detail="implicit seed needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeError("backward", self.shape, grad.shape, detail="seed gradient shape")
        ComputationGraph(self).backward(grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return slice_(self, index)

    # --- method forms ---

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def abs(self) -> "Tensor":
        return abs_(self)

    def softmax(self, axis: int = -1) -> "Tensor":
        return softmax(self, axis=axis)


# === Computation graph ===

@dataclass(frozen=True)
class OpRecord:
    """One node of the recorded graph: op kind, input ids and output id."""
    op: str
    inputs: tuple[int, ...]
    output: int


class ComputationGraph:
    """
    The subgraph of tensors reachable from `output` that require gradients.

    Nodes are tensor ids (creation order), edges run from input to output.
    Backward traversal uses the reverse of networkx's lexicographical
    topological order, so each node is visited exactly once and the order is
    reproducible run to run.
    """

    def __init__(self, output: Tensor):
        self.output = output
        self.graph = nx.DiGraph()
        stack = [output]
        while stack:
            node = stack.pop()
            if "tensor" in self.graph.nodes.get(node.id, {}):
                continue
            self.graph.add_node(node.id, tensor=node, op=node.op)
            for parent in node.parents:
                if parent.requires_grad:
                    self.graph.add_edge(parent.id, node.id)
                    stack.append(parent)

    def topological_order(self) -> list[Tensor]:
        return [self.graph.nodes[i]["tensor"] for i in nx.lexicographical_topological_sort(self.graph)]

    @property
    def records(self) -> list[OpRecord]:
        return [
            OpRecord(op=t.op, inputs=tuple(p.id for p in t.parents if p.requires_grad), output=t.id)
            for t in self.topological_order()
            if t.op != "leaf"
        ]

    def backward(self, seed: np.ndarray) -> None:
        self.output.grad += seed
        for node in reversed(self.topological_order()):
            if node.backward_fn is not None:
                node.backward_fn(node.grad)


# === Helpers ===

def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str,
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out.grad = np.zeros_like(out.data) if track else None
    out.op = op
    out.parents = tuple(parents) if track else ()
    out.backward_fn = backward_fn if track else None
    out.id = next(_node_ids)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accumulate(target: Tensor, grad: np.ndarray) -> None:
    if target.requires_grad:
        target.grad += _unbroadcast(grad, target.shape)


def _check_broadcast(op: str, *tensors: Tensor) -> None:
    try:
        np.broadcast_shapes(*(t.shape for t in tensors))
    except ValueError:
        raise ShapeError(op, *(t.shape for t in tensors)) from None


# === Elementwise ops ===

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), "mul", backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)

    def backward(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * a.data / (b.data ** 2))

    return _result(a.data / b.data, (a, b), "div", backward)


def neg(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        _accumulate(x, -g)

    return _result(-x.data, (x,), "neg", backward)


def power(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    exponent = float(exponent)

    def backward(g):
        _accumulate(x, g * exponent * x.data ** (exponent - 1.0))

    return _result(x.data ** exponent, (x,), "pow", backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    value = np.exp(x.data)

    def backward(g):
        _accumulate(x, g * value)

    return _result(value, (x,), "exp", backward)


def log(x) -> Tensor:
    """Natural log with the input clamped below at 1e-12 (zero gradient there)."""
    x = as_tensor(x)
    clamped = np.maximum(x.data, LOG_CLAMP)

    def backward(g):
        _accumulate(x, np.where(x.data >= LOG_CLAMP, g / clamped, 0.0))

    return _result(np.log(clamped), (x,), "log", backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        _accumulate(x, g * mask)

    return _result(np.where(mask, x.data, 0.0), (x,), "relu", backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    value = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        _accumulate(x, g * value * (1.0 - value))

    return _result(value, (x,), "sigmoid", backward)


def abs_(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        _accumulate(x, g * np.sign(x.data))

    return _result(np.abs(x.data), (x,), "abs", backward)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to `a`."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("maximum", a, b)
    take_a = a.data >= b.data

    def backward(g):
        _accumulate(a, g * take_a)
        _accumulate(b, g * ~take_a)

    return _result(np.where(take_a, a.data, b.data), (a, b), "maximum", backward)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to `a`."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("minimum", a, b)
    take_a = a.data <= b.data

    def backward(g):
        _accumulate(a, g * take_a)
        _accumulate(b, g * ~take_a)

    return _result(np.where(take_a, a.data, b.data), (a, b), "minimum", backward)


def gradient_reverse(x) -> Tensor:
    """
    Gradient reversal: identity forward, upstream gradient times -1 backward.

    The reversal carries no scale; loss weights decide how strongly the
    feature extractor is pushed.
    """
    x = as_tensor(x)

    def backward(g):
        _accumulate(x, -g)

    return _result(x.data.copy(), (x,), "gradient_reverse", backward)


# === Reductions and normalisations ===

def _normalise_axis(axis, ndim: int):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalise_axis(axis, x.ndim)
    value = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result(value, (x,), "sum", backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalise_axis(axis, x.ndim)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    value = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(x, np.broadcast_to(g / count, x.shape))

    return _result(value, (x,), "mean", backward)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    value = shifted / shifted.sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(x, value * (g - (g * value).sum(axis=axis, keepdims=True)))

    return _result(value, (x,), "softmax", backward)


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by `gamma` and shift by `beta`."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError("layernorm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    x_hat = (x.data - mu) * inv_std

    def backward(g):
        _accumulate(gamma, (g * x_hat).reshape(-1, width).sum(axis=0))
        _accumulate(beta, g.reshape(-1, width).sum(axis=0))
        if x.requires_grad:
            d_hat = g * gamma.data
            x.grad += inv_std / width * (
                width * d_hat
                - d_hat.sum(axis=-1, keepdims=True)
                - x_hat * (d_hat * x_hat).sum(axis=-1, keepdims=True)
            )

    return _result(x_hat * gamma.data + beta.data, (x, gamma, beta), "layernorm", backward)


# === Linear algebra ===

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (both operands ≥ 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dimensions") from None

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _result(a.data @ b.data, (a, b), "matmul", backward)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """
    2-D cross-correlation on NCHW input via im2col.

    Parameters
    ----------
    x : Tensor
        Input of shape (B, C_in, H, W).
    weight : Tensor
        Kernels of shape (C_out, C_in, kh, kw).
    bias : Tensor, optional
        Shape (C_out,).
    stride, padding : int
        Same on both spatial axes; padding is zeros.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    batch, c_in, height, width = x.shape
    c_out, _, kh, kw = weight.shape
    if height + 2 * padding < kh or width + 2 * padding < kw:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="kernel larger than padded input")
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError("conv2d", weight.shape, bias.shape, detail="bias")
        parents.append(bias)

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * out_h * out_w, c_in * kh * kw)
    w_mat = weight.data.reshape(c_out, -1)
    out = cols @ w_mat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(batch, out_h, out_w, c_out).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        if weight.requires_grad:
            weight.grad += (g2.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            bias.grad += g2.sum(axis=0)
        if x.requires_grad:
            d_cols = (g2 @ w_mat).reshape(batch, out_h, out_w, c_in, kh, kw)
            d_padded = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    d_padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += (
                        d_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            x.grad += d_padded[:, :, padding:padding + height, padding:padding + width]

    return _result(np.ascontiguousarray(out), parents, "conv2d", backward)


# === Shape ops ===

def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        value = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _result(value, (x,), "reshape", backward)


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, detail=f"axes {axes}")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))

    def backward(g):
        _accumulate(x, g.transpose(inverse))

    return _result(x.data.transpose(axes), (x,), "transpose", backward)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat", detail="nothing to concatenate")
    ndim = tensors[0].ndim
    axis = axis % ndim
    reference = [s for i, s in enumerate(tensors[0].shape) if i != axis]
    for t in tensors:
        if t.ndim != ndim or [s for i, s in enumerate(t.shape) if i != axis] != reference:
            raise ShapeError("concat", *(u.shape for u in tensors), detail=f"axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", backward)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(i is None or i is Ellipsis or isinstance(i, (int, np.integer, slice)) for i in items)


def slice_(x, index) -> Tensor:
    """Basic or fancy indexing; repeated indices accumulate gradients."""
    x = as_tensor(x)
    try:
        value = np.array(x.data[index])
    except IndexError as exc:
        raise ShapeError("slice", x.shape, detail=str(exc)) from None
    basic = _is_basic_index(index)

    def backward(g):
        if not x.requires_grad:
            return
        if basic:
            x.grad[index] += g
        else:
            np.add.at(x.grad, index, g)

    return _result(value, (x,), "slice", backward)


__all__ = [
    "LOG_CLAMP",
    "Tensor",
    "OpRecord",
    "ComputationGraph",
    "no_grad",
    "is_grad_enabled",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "exp",
    "log",
    "relu",
    "sigmoid",
    "abs_",
    "maximum",
    "minimum",
    "gradient_reverse",
    "sum_",
    "mean",
    "softmax",
    "layernorm",
    "matmul",
    "conv2d",
    "reshape",
    "transpose",
    "concat",
    "slice_",
]
