"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every primitive returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. :func:`backward` walks
that graph once in reverse topological order.

Graph ops work along axis 0: ``gather`` selects rows, ``scatter_add`` sums rows
into segments and ``segment_softmax`` normalises within each segment.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run primitives without recording the graph (inference path)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=float)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g / (2.0 * out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return _node(a.data * factor, (a,), lambda g: (g * factor,))


def clamp(a, lo=None, hi=None) -> Tensor:
    """Elementwise clamp; bounds are constants. Gradient passes where lo <= a <= hi, zero elsewhere."""
    a = as_tensor(a)
    lo_arr = -np.inf if lo is None else np.asarray(lo.data if isinstance(lo, Tensor) else lo, dtype=float)
    hi_arr = np.inf if hi is None else np.asarray(hi.data if isinstance(hi, Tensor) else hi, dtype=float)
    out = np.minimum(np.maximum(a.data, lo_arr), hi_arr)
    inside = (a.data >= lo_arr) & (a.data <= hi_arr)
    return _node(out, (a,), lambda g: (np.where(inside, g, 0.0),))


def wrap_angle(a) -> Tensor:
    """Map to (-pi, pi]; piecewise shift by multiples of 2 pi, so the gradient is the identity."""
    a = as_tensor(a)
    out = a.data - 2.0 * np.pi * np.ceil((a.data - np.pi) / (2.0 * np.pi))
    return _node(out, (a,), lambda g: (g,))


# --- reductions and shape ops ------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[k] for k in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def max_reduce(a, axis=None) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximiser."""
    a = as_tensor(a)
    if axis is None:
        flat = int(np.argmax(a.data))
        out = a.data.reshape(-1)[flat]

        def backward(g):
            grad = np.zeros(a.size)
            grad[flat] = g
            return (grad.reshape(a.shape),)

        return _node(out, (a,), backward)

    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        grad = np.zeros(a.shape)
        np.put_along_axis(grad, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _node(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[t.shape for t in tensors]} along axis {axis}") from None
    edges = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, edges, axis=axis))

    return _node(out, tuple(tensors), backward)


def index_select(a, index) -> Tensor:
    """General ``a[index]`` (basic or advanced indexing); repeated indices accumulate."""
    a = as_tensor(a)

    def backward(g):
        grad = np.zeros(a.shape)
        np.add.at(grad, index, g)
        return (grad,)

    return _node(a.data[index], (a,), backward)


def _segment_sum(values: np.ndarray, segments: np.ndarray, n: int) -> np.ndarray:
    if values.ndim == 1:
        return np.bincount(segments, weights=values, minlength=n)
    width = int(np.prod(values.shape[1:]))
    flat = values.reshape(values.shape[0], width)
    keys = (segments[:, None] * width + np.arange(width)[None, :]).reshape(-1)
    out = np.bincount(keys, weights=flat.reshape(-1), minlength=n * width)
    return out.reshape((n,) + values.shape[1:])


def gather(a, index) -> Tensor:
    """Rows ``a[index]`` for an integer index vector."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    return _node(a.data[index], (a,), lambda g: (_segment_sum(g, index, n),))


def scatter_add(src, index, n: int) -> Tensor:
    """``out[k] = sum of src[e] over e with index[e] == k``; ``out`` has ``n`` rows."""
    src = as_tensor(src)
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != src.shape[0]:
        raise ValueError(f"scatter_add: index length {index.shape[0]} does not match src shape {src.shape}")
    return _node(_segment_sum(src.data, index, n), (src,), lambda g: (g[index],))


def segment_softmax(logits, segments, n: int) -> Tensor:
    """Softmax of ``logits`` along axis 0 within each segment (extra axes are independent)."""
    logits = as_tensor(logits)
    segments = np.asarray(segments, dtype=np.int64)
    z = logits.data
    peak = np.full((n,) + z.shape[1:], -np.inf)
    np.maximum.at(peak, segments, z)
    e = np.exp(z - peak[segments])
    total = _segment_sum(e, segments, n)
    out = e / total[segments]

    def backward(g):
        weighted = _segment_sum(g * out, segments, n)
        return (out * (g - weighted[segments]),)

    return _node(out, (logits,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def affine(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` for row-major batches."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# --- graph traversal ---------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf with ``requires_grad`` that ``loss`` depends on.

    Leaves that already hold a gradient raise; call :func:`zero_grad` between passes.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    order = _topological_order(loss)
    stale = [t for t in order if t._backward is None and t.grad is not None]
    if stale:
        raise RuntimeError(
            f"{len(stale)} leaf tensor(s) already hold gradients; call zero_grad() before backward again"
        )
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


# --- finite-difference checking ------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    passed: bool
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(fn, inputs, h: float = 1e-6) -> list[np.ndarray]:
    """Central differences of scalar ``fn(*inputs)`` w.r.t. every entry of every input."""
    grads = []
    with no_grad():
        for t in inputs:
            grad = np.zeros(t.shape)
            flat = t.data.reshape(-1)
            for k in range(flat.size):
                saved = flat[k]
                flat[k] = saved + h
                up = fn(*inputs).item()
                flat[k] = saved - h
                down = fn(*inputs).item()
                flat[k] = saved
                grad.reshape(-1)[k] = (up - down) / (2.0 * h)
            grads.append(grad)
    return grads


def gradient_check(fn, inputs, h: float = 1e-6, tol: float = 1e-5, floor: float = 1e-8) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``fn(*inputs)`` with central differences."""
    inputs = [as_tensor(t) for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    backward(fn(*inputs))
    analytic = [t.grad if t.grad is not None else np.zeros(t.shape) for t in inputs]
    numeric = numeric_gradient(fn, inputs, h)
    rel = max((float(relative_error(a, n, floor).max(initial=0.0)) for a, n in zip(analytic, numeric)), default=0.0)
    abs_err = max((float(np.abs(a - n).max(initial=0.0)) for a, n in zip(analytic, numeric)), default=0.0)
    return GradCheckReport(rel, abs_err, rel <= tol, analytic, numeric)
