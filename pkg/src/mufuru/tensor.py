"""Dense float64 tensors with recorded reverse-mode differentiation.

Every differentiable primitive returns a new :class:`Tensor` that remembers its
operands and a backward rule.  :func:`backward` linearises the graph reachable
from a scalar loss into a :class:`Tape` (topological order) and replays it in
reverse, summing gradient contributions from every use of a tensor.

Only the leading (batch) axis broadcasts in binary operations.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, DomainError

_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording backward rules (per thread)."""
    previous = is_grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = previous


class Tensor:
    """A float64 array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar; everything routes through the primitives below
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, float(value)))


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# tape and backward pass


class Tape:
    """Recorded primitive applications in topological order.

    Every operand of ``entries[i]`` is either a leaf or appears at some
    ``entries[j]`` with ``j < i``.
    """

    def __init__(self, entries: list[Tensor]):
        self.entries = entries

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
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.entries)

    def backward(self, seed: np.ndarray) -> None:
        pending: dict[int, np.ndarray] = {id(self.entries[-1]): seed}
        for node in reversed(self.entries):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = np.array(g) if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every tensor that requires grad and reaches ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return Tape([])
    tape = Tape.record(loss)
    tape.backward(np.ones_like(loss.data))
    return tape


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix (or matrix-vector) product; operands may be 1-D or 2-D."""
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def grad(g):
        if B.ndim == 2:
            da = g @ B.T
        elif A.ndim == 2:
            da = np.outer(g, B)
        else:
            da = g * B
        if A.ndim == 2:
            db = A.T @ g
        elif B.ndim == 2:
            db = np.outer(A, g)
        else:
            db = g * A
        return da, db

    return Tensor._result(A @ B, (a, b), grad)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return Tensor._result(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return Tensor._result(out, (a,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# element-wise functions


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def _log(x):
    if np.any(x <= 0):
        raise DomainError("log of a non-positive value")
    return np.log(x)


# kind -> (forward(x, c), backward(x, y, g, c))
UNARY = {
    "tanh": (lambda x, c: np.tanh(x), lambda x, y, g, c: g * (1.0 - y * y)),
    "sigmoid": (lambda x, c: _sigmoid(x), lambda x, y, g, c: g * y * (1.0 - y)),
    "neg": (lambda x, c: -x, lambda x, y, g, c: -g),
    "abs": (lambda x, c: np.abs(x), lambda x, y, g, c: g * np.sign(x)),
    "exp": (lambda x, c: np.exp(x), lambda x, y, g, c: g * y),
    "log": (lambda x, c: _log(x), lambda x, y, g, c: g / x),
    "scale": (lambda x, c: c * x, lambda x, y, g, c: c * g),
}

BINARY = ("add", "sub", "mul", "max", "min")


def _broadcast_kind(a: Tensor, b: Tensor, kind: str) -> int:
    """0: same shape, 1: b repeats over a's batch axis, 2: a repeats over b's."""
    if a.shape == b.shape:
        return 0
    if a.ndim == b.ndim + 1 and a.shape[1:] == b.shape:
        return 1
    if b.ndim == a.ndim + 1 and b.shape[1:] == a.shape:
        return 2
    raise DimensionError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def elementwise(kind: str, a: Tensor, b: Tensor | None = None, c: float = 1.0) -> Tensor:
    """Apply a unary or binary element-wise function.

    Unary kinds: tanh, sigmoid, neg, abs, exp, log, scale (multiply by ``c``).
    Binary kinds: add, sub, mul, max, min.  On max/min ties the gradient goes to ``a``.
    """
    if kind in UNARY:
        if b is not None:
            raise ValueError(f"{kind} is unary")
        fwd, bwd = UNARY[kind]
        x = a.data
        y = fwd(x, c)
        return Tensor._result(y, (a,), lambda g: (bwd(x, y, g, c),))
    if kind not in BINARY:
        raise ValueError(f"unknown element-wise kind {kind!r}")
    if b is None:
        raise ValueError(f"{kind} needs two operands")
    mode = _broadcast_kind(a, b, kind)
    x, z = a.data, b.data

    def fold(ga, gb):
        if mode == 1:
            gb = gb.sum(axis=0)
        elif mode == 2:
            ga = ga.sum(axis=0)
        return ga, gb

    if kind == "add":
        return Tensor._result(x + z, (a, b), lambda g: fold(g, g))
    if kind == "sub":
        return Tensor._result(x - z, (a, b), lambda g: fold(g, -g))
    if kind == "mul":
        return Tensor._result(x * z, (a, b), lambda g: fold(g * z, g * x))
    first = (x >= z) if kind == "max" else (x <= z)
    out = np.where(first, x, z)
    return Tensor._result(out, (a, b), lambda g: fold(g * first, g * ~first))


def tanh(a):
    return elementwise("tanh", a)


def sigmoid(a):
    return elementwise("sigmoid", a)


def neg(a):
    return elementwise("neg", a)


def absolute(a):
    return elementwise("abs", a)


def exp(a):
    return elementwise("exp", a)


def log(a):
    return elementwise("log", a)


def scale(a, c: float):
    return elementwise("scale", a, c=c)


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def maximum(a, b):
    return elementwise("max", a, b)


def minimum(a, b):
    return elementwise("min", a, b)


# ---------------------------------------------------------------------------
# structural primitives


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (the feature axis by default)."""
    if not tensors:
        raise ValueError("concat of an empty list")
    arrays = [t.data for t in tensors]
    ax = axis % arrays[0].ndim
    try:
        out = np.concatenate(arrays, axis=ax)
    except ValueError as exc:
        raise DimensionError(f"concat: shapes {[a.shape for a in arrays]} differ off axis {axis}") from exc

    def grad(g):
        return tuple(np.split(g, np.cumsum([a.shape[ax] for a in arrays])[:-1], axis=ax))

    return Tensor._result(out, tuple(tensors), grad)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """``[a; b]`` along the feature axis."""
    return concat([a, b], axis=-1)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """``a[..., start:stop]``."""
    shape = a.shape

    def grad(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return Tensor._result(a.data[..., start:stop], (a,), grad)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("stack of an empty list")
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise DimensionError(f"stack: shapes {tensors[0].shape} and {t.shape} differ")
    ax = axis % (tensors[0].ndim + 1)

    def grad(g):
        return tuple(np.moveaxis(g, ax, 0))

    return Tensor._result(np.stack([t.data for t in tensors], axis=ax), tuple(tensors), grad)


def take(a: Tensor, index: int, axis: int = 0) -> Tensor:
    """Select one slice along ``axis``, dropping that axis."""
    shape = a.shape
    ax = axis % a.ndim

    def grad(g):
        full = np.zeros(shape)
        np.moveaxis(full, ax, 0)[index] = g
        return (full,)

    return Tensor._result(np.take(a.data, index, axis=ax), (a,), grad)


def total(a: Tensor, axis: int | None = None) -> Tensor:
    """Sum over ``axis`` (all elements when ``None``)."""
    shape = a.shape

    def grad(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._result(np.asarray(a.data.sum(axis=axis)), (a,), grad)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._result(y, (a,), grad)


def softmax_over_stack(logits: Sequence[Tensor]) -> list[Tensor]:
    """Normalise ``l`` same-shaped logit tensors against each other per element."""
    if len(logits) == 0:
        raise ValueError("softmax_over_stack needs at least one tensor")
    weights = softmax(stack(logits, axis=0), axis=0)
    return [take(weights, j, axis=0) for j in range(len(logits))]


def embedding(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids``; gradients scatter-add back."""
    ids = np.asarray(ids, dtype=np.intp)
    shape = table.shape

    def grad(g):
        full = np.zeros(shape)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor._result(table.data[ids], (table,), grad)


def cross_entropy(logits: Tensor, target, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of ``target`` under ``softmax(logits)``.

    ``logits`` is ``[C]`` with an integer target, or ``[B, C]`` with ``B``
    targets reduced by ``"mean"`` or ``"sum"``.
    """
    z = logits.data
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    t = np.atleast_1d(np.asarray(target))
    n_classes = z2.shape[1]
    if t.shape != (z2.shape[0],):
        raise DimensionError(f"cross_entropy: {t.shape[0]} targets for logits {z.shape}")
    if not np.issubdtype(t.dtype, np.integer) or np.any(t < 0) or np.any(t >= n_classes):
        raise ValueError(f"cross_entropy: target out of range [0, {n_classes})")
    m = z2.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z2 - m).sum(axis=1))
    rows = np.arange(len(t))
    nll = lse - z2[rows, t]
    denom = len(t) if reduction == "mean" else 1
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")

    def grad(g):
        p = np.exp(z2 - lse[:, None])
        p[rows, t] -= 1.0
        p *= g / denom
        return (p[0] if single else p,)

    return Tensor._result(np.asarray(nll.sum() / denom), (logits,), grad)


# ---------------------------------------------------------------------------
# finite-difference verification


def _numeric_grad(f, params, p, eps):
    out = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    view = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = float(f(params).data)
            flat[i] = orig - eps
            minus = float(f(params).data)
            flat[i] = orig
            view[i] = (plus - minus) / (2.0 * eps)
    return out


def _relative_error(analytic, numeric):
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check_groups(f: Callable, params: Sequence[Tensor], eps: float = 1e-5,
                      names: Iterable[str] | None = None) -> dict[str, float]:
    """Maximum relative analytic-vs-central-difference error per parameter tensor.

    ``f(params)`` must rebuild the scalar loss from the current parameter values.
    """
    params = list(params)
    names = list(names) if names is not None else [
        p.name or f"param{i}" for i, p in enumerate(params)]
    for p in params:
        p.grad = None
    backward(f(params))
    report = {}
    for name, p in zip(names, params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = _numeric_grad(f, params, p, eps)
        report[name] = _relative_error(analytic, numeric)
    return report


def grad_check(f: Callable, params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between analytic and finite-difference gradients."""
    errors = list(grad_check_groups(f, params, eps).values())
    if not errors:
        return 0.0
    return float(np.max(errors))
