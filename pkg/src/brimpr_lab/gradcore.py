"""Small reverse-mode autodiff engine over float64 numpy arrays.

Every op returns a new :class:`Tensor` that remembers its inputs and a local
backward rule.  ``backprop`` walks the graph in reverse creation order, so a
fresh graph is built on every forward pass and dropped afterwards.
"""
from __future__ import annotations

import contextvars
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-8

_seq = itertools.count()
_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("active_tape", default=None)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """A float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "requires_grad", "op", "_parents", "_backward", "seq", "name", "__weakref__")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None,
                 *, _parents: tuple = (), _backward: Callable | None = None, _op: str = "leaf"):
        data = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite values in {_op} output (shape {data.shape})")
        self.data = data
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.op = _op
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self.seq = next(_seq)
        self.name = name
        tape = _active_tape.get()
        if tape is not None:
            tape.nodes.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


class Tape:
    """Collects every tensor created while active, in creation order.

    >>> with Tape() as tape:
    ...     y = exp(Tensor([0.0], requires_grad=True))
    >>> tape.nodes[-1] is y
    True
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)

    def record(self, op_kind: str, *inputs, **attrs) -> Tensor:
        if op_kind not in OPS:
            raise KeyError(f"unknown op kind {op_kind!r}")
        token = _active_tape.set(self)
        try:
            return OPS[op_kind](*inputs, **attrs)
        finally:
            _active_tape.reset(token)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _make(value, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    return Tensor(value, _parents=parents, _backward=backward, _op=op)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), backward, "div")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    # d/dx sqrt at 0 is taken as 0 so zero-variance batches stay finite
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return _make(out, (a,), backward, "sqrt")


def gelu(a) -> Tensor:
    """tanh approximation of GELU; smooth everywhere, which keeps finite-difference checks clean."""
    a = as_tensor(a)
    x = a.data
    c = np.sqrt(2.0 / np.pi)
    inner = c * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner),)

    return _make(out, (a,), backward, "gelu")


# ---------------------------------------------------------------- reductions / shape

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward, "matmul")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    axes = range(a.ndim) if axis is None else ((axis,) if isinstance(axis, int) else axis)
    count = int(np.prod([a.shape[ax] for ax in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(out, (a,), backward, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence, axis: int = -2) -> Tensor:
    """Concatenate along ``axis`` (the token axis by default)."""
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(ts), backward, "concat")


def take(a, indices, axis: int = -2) -> Tensor:
    """Gather along ``axis``.

    1-D ``indices`` select the same positions for every leading index;
    indices with the full rank of ``a`` (size 1 on the trailing axes) gather
    per sample, as ``np.take_along_axis`` does.
    """
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    if idx.ndim == 1:
        if idx.size and (idx.min() < -a.shape[axis] or idx.max() >= a.shape[axis]):
            raise ShapeError(f"take: index out of range for axis of size {a.shape[axis]}")
        out = np.take(a.data, idx, axis=axis)

        def backward(g):
            ga = np.zeros_like(a.data)
            sl = [slice(None)] * a.ndim
            sl[axis] = idx
            np.add.at(ga, tuple(sl), g)
            return (ga,)
    else:
        if idx.ndim != a.ndim:
            raise ShapeError(f"take: index rank {idx.ndim} does not match tensor rank {a.ndim}")
        out = np.take_along_axis(a.data, idx, axis=axis)
        full_idx = np.broadcast_to(idx, out.shape)

        def backward(g):
            ga = np.zeros_like(a.data)
            grids = list(np.indices(out.shape, sparse=True))
            grids[axis] = full_idx
            np.add.at(ga, tuple(grids), g)
            return (ga,)

    return _make(out, (a,), backward, "take")


def slice_axis(a, start: int, stop: int, axis: int = -2) -> Tensor:
    return take(a, np.arange(start, stop), axis=axis)


# ---------------------------------------------------------------- composite ops with fused rules

def softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def layer_norm(x, scale, shift, eps: float = EPS) -> Tensor:
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    d = x.shape[-1]
    if scale.shape != (d,) or shift.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {scale.shape}, {shift.shape} do not match last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * scale.data + shift.data

    def backward(g):
        gx_hat = g * scale.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        gs = (g * xhat).reshape(-1, d).sum(axis=0)
        gb = g.reshape(-1, d).sum(axis=0)
        return gx, gs, gb

    return _make(out, (x, scale, shift), backward, "layer_norm")


def norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at the origin is taken as 0."""
    a = as_tensor(a)
    out = np.sqrt((a.data**2).sum(axis=axis))

    def backward(g):
        n = np.expand_dims(out, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, np.expand_dims(g, axis) * a.data / safe, 0.0),)

    return _make(out, (a,), backward, "norm")


def cosine_similarity(a, b, axis: int = -1, eps: float = EPS) -> Tensor:
    """<a, b> / (max(|a|, eps) * max(|b|, eps)), broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "cosine_similarity")
    na = np.sqrt((a.data**2).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b.data**2).sum(axis=axis, keepdims=True))
    ca, cb = np.maximum(na, eps), np.maximum(nb, eps)
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    s = dot / (ca * cb)

    def backward(g):
        g = np.expand_dims(g, axis)
        da = b.data / (ca * cb) - np.where(na > eps, s * a.data / ca**2, 0.0)
        db = a.data / (ca * cb) - np.where(nb > eps, s * b.data / cb**2, 0.0)
        return _unbroadcast(g * da, a.shape), _unbroadcast(g * db, b.shape)

    return _make(np.squeeze(s, axis=axis), (a, b), backward, "cosine_similarity")


OPS: dict[str, Callable[..., Tensor]] = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "exp": exp, "log": log, "sqrt": sqrt, "gelu": gelu,
    "matmul": matmul, "sum": tsum, "mean": mean,
    "reshape": reshape, "transpose": transpose,
    "concat": concat, "take": take, "slice": slice_axis,
    "softmax": softmax, "layer_norm": layer_norm,
    "norm": norm, "cosine_similarity": cosine_similarity,
}


def record(op_kind: str, *inputs, **attrs) -> Tensor:
    """Apply a named op; the result joins the active :class:`Tape`, if any."""
    if op_kind not in OPS:
        raise KeyError(f"unknown op kind {op_kind!r}")
    return OPS[op_kind](*inputs, **attrs)


# ---------------------------------------------------------------- backprop

def _reachable(loss: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    stack = [loss]
    out = []
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        out.append(t)
        stack.extend(p for p in t._parents if p.requires_grad)
    out.sort(key=lambda t: t.seq, reverse=True)
    return out


def backprop(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``loss`` with respect to ``params``.

    With ``params=None`` every reachable leaf that requires grad is returned.
    Listed parameters the loss does not depend on get zero arrays.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backprop needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in _reachable(loss):
            g = grads.get(id(node))
            if node._backward is None:
                leaves[id(node)] = node
                continue
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
    if params is None:
        return {t: grads[i] for i, t in leaves.items()}
    return {p: grads.get(id(p), np.zeros_like(p.data)) for p in params}


def finite_difference_check(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
                            analytic: dict[Tensor, np.ndarray] | None = None) -> float:
    """Max relative error between backprop and central differences over all entries of ``params``.

    ``fn`` must rebuild the graph from the current ``param.data`` on every call.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base1, base2 = fn(), fn()
    if not np.array_equal(base1.data, base2.data):
        raise ValueError("function is not deterministic for fixed parameters")
    if analytic is None:
        analytic = backprop(base1, params)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        ga = analytic[p].reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            fp = fn().item()
            flat[k] = orig - step
            fm = fn().item()
            flat[k] = orig
            num = (fp - fm) / (2 * step)
            err = abs(ga[k] - num) / max(abs(ga[k]), abs(num), 1e-12)
            worst = max(worst, err)
    return worst
