"""Dense tensors with a record-on-execute reverse-mode tape.

Every op returns a new :class:`Tensor`.  When any input requires a gradient
the output keeps a reference to its parents and a closure that maps the
output gradient to parent gradients.  :func:`backward` walks that graph once
in reverse topological order; a consumed graph cannot be replayed.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
CHECK_DTYPE = np.float64

LN_EPS = 1e-5
BCE_CLAMP = 1e-7


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Backward was requested on a non-scalar or already consumed graph."""


class NumericalError(FloatingPointError):
    """An op produced NaN or Inf."""


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{op} produced non-finite values")
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None, _parents=(), _op: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = _op
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item()

    def detach(self) -> Tensor:
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def astype(self, dtype) -> Tensor:
        """Leaf copy in another precision (used for 64-bit gradient checks)."""
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def _raise_item():
    raise ShapeError("item() requires a single-element tensor")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = DEFAULT_DTYPE
    return Tensor(np.asarray(x), dtype=dtype)


def _wrap(data: np.ndarray, parents: Sequence[Tensor], grad_fn, op: str) -> Tensor:
    _check_finite(data, op)
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype, _parents=tuple(parents) if needs else (), _op=op)
    if needs:
        out._backward = grad_fn
    return out


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    dtype = (ta or tb).dtype
    return (ta if ta is not None else Tensor(np.asarray(a), dtype=dtype)), (
        tb if tb is not None else Tensor(np.asarray(b), dtype=dtype)
    )


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from exc


# -- elementwise arithmetic ---------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _wrap(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "sub")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _wrap(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "mul")

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _wrap(a.data * b.data, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "div")

    def grad_fn(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _wrap(a.data / b.data, (a, b), grad_fn, "div")


def power(x: Tensor, exponent: float) -> Tensor:
    def grad_fn(g):
        return (g * exponent * x.data ** (exponent - 1),)

    return _wrap(x.data**exponent, (x,), grad_fn, "pow")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def grad_fn(g):
        return (g * out,)

    return _wrap(out, (x,), grad_fn, "exp")


def log(x: Tensor) -> Tensor:
    def grad_fn(g):
        return (g / x.data,)

    return _wrap(np.log(x.data), (x,), grad_fn, "log")


def sqrt(x: Tensor) -> Tensor:
    """Square root with a zero subgradient at 0 (distances between duplicates)."""
    out = np.sqrt(np.maximum(x.data, 0))

    def grad_fn(g):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g / (2 * safe), 0).astype(x.dtype),)

    return _wrap(out, (x,), grad_fn, "sqrt")


def clamp_min(x: Tensor, low: float) -> Tensor:
    mask = x.data > low

    def grad_fn(g):
        return (g * mask,)

    return _wrap(np.maximum(x.data, low).astype(x.dtype), (x,), grad_fn, "clamp_min")


# -- activations ---------------------------------------------------------------
def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _wrap(x.data * mask, (x,), grad_fn, "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # two-branch form keeps exp() bounded for large |x|
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(d.dtype)

    def grad_fn(g):
        return (g * out * (1 - out),)

    return _wrap(out, (x,), grad_fn, "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d**3)
    t = np.tanh(inner)
    out = 0.5 * d * (1 + t)

    def grad_fn(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * d**2)
        return (g * (0.5 * (1 + t) + 0.5 * d * (1 - t * t) * dinner),)

    return _wrap(out, (x,), grad_fn, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _wrap(out, (x,), grad_fn, "softmax")


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm: gain/bias must have shape ({d},), got {gain.shape}, {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat = (-1, d)
        return (
            gx,
            (g * xhat).reshape(flat).sum(axis=0),
            g.reshape(flat).sum(axis=0),
        )

    return _wrap(out, (x, gain, bias), grad_fn, "layernorm")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: scaled mask at train time, identity otherwise."""
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs a seeded generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)

    def grad_fn(g):
        return (g * keep,)

    return _wrap(x.data * keep, (x,), grad_fn, "dropout")


# -- linear algebra and structure ----------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _wrap(out, (a, b), grad_fn, "matmul")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _wrap(out, (x,), grad_fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    def grad_fn(g):
        return (g.reshape(x.shape),)

    return _wrap(x.data.reshape(shape), (x,), grad_fn, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)

    def grad_fn(g):
        return (np.transpose(g, inverse),)

    return _wrap(np.transpose(x.data, axes), (x,), grad_fn, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError(f"concat: non-axis dimensions differ ({ref.shape} vs {t.shape})")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=ax))

    return _wrap(np.concatenate([t.data for t in tensors], axis=ax), tensors, grad_fn, "concat")


def take(x: Tensor, index) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""

    def grad_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _wrap(np.array(x.data[index]), (x,), grad_fn, "take")


def where(mask: np.ndarray, a: Tensor, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def grad_fn(g):
        return _unbroadcast(np.where(mask, g, 0), a.shape), _unbroadcast(np.where(mask, 0, g), b.shape)

    return _wrap(np.where(mask, a.data, b.data).astype(a.dtype), (a, b), grad_fn, "where")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = sqrt(tsum(x * x, axis=axis, keepdims=True) + eps)
    return x / norm


# -- losses ---------------------------------------------------------------------
def bce_loss(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy; probabilities clamped to [1e-7, 1 - 1e-7]."""
    y = np.asarray(y, dtype=p.dtype).reshape(p.shape)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("bce_loss labels must be 0 or 1")
    pc = np.clip(p.data, BCE_CLAMP, 1 - BCE_CLAMP)
    inside = (p.data >= BCE_CLAMP) & (p.data <= 1 - BCE_CLAMP)
    losses = -(y * np.log(pc) + (1 - y) * np.log(1 - pc))
    out = np.asarray(losses.mean(), dtype=p.dtype)
    n = p.data.size

    def grad_fn(g):
        return (g * inside * (pc - y) / (pc * (1 - pc)) / n,)

    return _wrap(out, (p,), grad_fn, "bce")


# -- backward pass ----------------------------------------------------------------
def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward()")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")

    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        if node._consumed:
            raise GraphError("graph already consumed by a previous backward()")
        g = grads.pop(id(node), None)
        if node._backward is None:
            if node.requires_grad and g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in order:
        if node._backward is not None:
            node._consumed = True
            node._backward = None
            node._parents = ()


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, eps: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (evaluated without the tape)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = x.data.astype(np.float64 if x.dtype == np.float64 else x.dtype, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def evaluate(arr):
        out = f(Tensor(arr.reshape(base.shape), dtype=base.dtype))
        return float(out.data.reshape(-1)[0]) if isinstance(out, Tensor) else float(out)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = evaluate(flat)
        flat[i] = orig - eps
        lo = evaluate(flat)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad
