"""Dense tensors with define-by-run reverse-mode differentiation.

Every operation on a :class:`Tensor` that requires gradients records its
parents and a backward rule. ``loss.backward()`` topologically orders the
recorded graph into a :class:`Tape`, walks it in reverse and accumulates
gradients into leaf tensors. The graph is freed afterwards, so a second
``backward`` on the same loss raises.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterator, Sequence

import numpy as np

_state = {
    "dtype": np.dtype(np.float32),
    "grad_enabled": True,
    "debug": bool(os.environ.get("AM_DEBUG")),
}


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _state["dtype"] = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new leaf tensors (float64 for gradient checks)."""
    previous = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


def is_grad_enabled() -> bool:
    return _state["grad_enabled"]


def set_debug(flag: bool) -> None:
    """In debug mode every op result is checked for NaN/Inf."""
    _state["debug"] = bool(flag)


class Tensor:
    """An n-dimensional float array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_freed")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = np.array(data, dtype=dtype or get_default_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] | None = None
        self._backward: Callable | None = None
        self._op = "leaf"
        self._freed = False

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.grad = None
        out.requires_grad = False
        out.name = None
        out._parents = None
        out._backward = None
        out._op = "leaf"
        out._freed = False
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._parents is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff ------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("root does not require grad; nothing was recorded")
        tape = Tape.record(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(tape.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                g = np.zeros_like(node.data)
            if node._parents is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        tape.free()

    # -- operator sugar ------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
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


def _raise_item(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


class Tape:
    """Recorded operations reachable from a root, in topological order (inputs first)."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            if node._freed:
                raise RuntimeError(
                    "graph already consumed by a previous backward(); rerun the forward pass"
                )
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents or ():
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    @property
    def ops(self) -> list[str]:
        return [n._op for n in self.nodes if n._parents is not None]

    def free(self) -> None:
        for node in self.nodes:
            if node._parents is not None:
                node._backward = None
                node._freed = True


# ---------------------------------------------------------------------------
# op plumbing


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else get_default_dtype()
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor._wrap(data)
    out._op = op
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    if _state["debug"] and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None,
        )

    return _result(a.data / b.data, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a: Tensor) -> Tensor:
    from scipy.special import expit

    out = expit(a.data)
    return _result(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    from scipy.special import erf

    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    out = (x * cdf).astype(x.dtype, copy=False)
    local = (cdf + x * pdf).astype(x.dtype, copy=False)
    return _result(out, (a,), lambda g: (g * local,), "gelu")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, backward, "concat")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Select entries along one axis with a shared integer index array."""
    indices = np.asarray(indices, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _result(np.take(a.data, indices, axis=axis), (a,), backward, "take")


def gather_rows(a: Tensor, indices) -> Tensor:
    """Per-batch row gather: ``a`` is (B, N, ...), ``indices`` is (B, K) -> (B, K, ...)."""
    indices = np.asarray(indices, dtype=np.intp)
    batch = np.arange(a.shape[0])[:, None]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (batch, indices), g)
        return (full,)

    return _result(a.data[batch, indices], (a,), backward, "gather_rows")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch dimensions."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# normalisation


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ValueError(f"softmax over an empty axis (shape {a.shape}, axis {axis})")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then apply ``gamma``, ``beta``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm affine shapes {gamma.shape}, {beta.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = centred * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            gxhat = g * gamma.data
            gx = inv * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gamma.requires_grad:
            gg = _unbroadcast(g * xhat, gamma.shape)
        if beta.requires_grad:
            gb = _unbroadcast(g, beta.shape)
        return gx, gg, gb

    return _result(out, (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------------------
# losses

BCE_CLAMP = 1e-7


def bce_loss(yhat: Tensor, y) -> Tensor:
    """Mean binary cross-entropy of probabilities ``yhat`` against 0/1 labels."""
    y_arr = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=yhat.dtype)
    if y_arr.shape != yhat.shape:
        raise ValueError(f"bce_loss shape mismatch: {yhat.shape} vs {y_arr.shape}")
    if not np.all((y_arr == 0) | (y_arr == 1)):
        raise ValueError("bce_loss labels must be 0 or 1")
    lo, hi = BCE_CLAMP, 1.0 - BCE_CLAMP
    p = np.clip(yhat.data, lo, hi)
    n = yhat.size
    terms = -(y_arr * np.log(p) + (1 - y_arr) * np.log1p(-p))
    out = np.asarray(terms.mean(), dtype=yhat.dtype)
    inside = (yhat.data >= lo) & (yhat.data <= hi)

    def backward(g):
        local = (p - y_arr) / (p * (1 - p)) / n
        return (g * local * inside,)

    return _result(out, (yhat,), backward, "bce_loss")


def mse_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target, like=pred)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = sub(pred, target)
    return mean(mul(diff, diff))
