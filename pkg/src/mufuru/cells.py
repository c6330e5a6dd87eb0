"""Vanilla, GRU and MuFuRU cell functions.

All three cells map ``(x_t, s_{t-1})`` to ``(s_t, h_t)`` with ``h_t = s_t``.
Inputs may be single vectors ``[N]`` or batches ``[B, N]``; weights act on the
feature axis, so ``W @ [x; s]`` is computed as ``[x; s] @ W.T``.

GRU gates are stacked ``[r; u]`` in ``W_u``/``b_u``, and the update gate ``u``
weights the *previous* state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import DataError, DimensionError
from .tensor import Tensor

# ---------------------------------------------------------------------------
# composition operations


def _keep(s, v):
    return s


def _replace(s, v):
    return v


def _forget(s, v):
    return T.constant(np.zeros(s.shape))


def _diff(s, v):
    return T.scale(T.absolute(T.sub(s, v)), 0.5)


COMPOSITION_OPS: dict[str, Callable[[Tensor, Tensor], Tensor]] = {
    "keep": _keep,
    "replace": _replace,
    "max": T.maximum,
    "min": T.minimum,
    "mul": T.mul,
    "diff": _diff,
    "forget": _forget,
}

ALL_OPS = tuple(COMPOSITION_OPS)


def check_ops(ops: Sequence[str]) -> tuple[str, ...]:
    ops = tuple(ops)
    if not ops:
        raise ValueError("a MuFuRU needs at least one composition operation")
    for name in ops:
        if name not in COMPOSITION_OPS:
            raise ValueError(f"unknown composition operation {name!r}; choose from {ALL_OPS}")
    return ops


# ---------------------------------------------------------------------------
# parameter containers


@dataclass(frozen=True)
class CellShape:
    input_size: int
    state_size: int

    def __post_init__(self):
        if self.input_size < 1 or self.state_size < 1:
            raise ValueError(f"cell sizes must be positive, got {self}")

    @property
    def output_size(self) -> int:
        return self.state_size


class _Params:
    kind = ""

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        raise NotImplementedError

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    @property
    def shape(self) -> CellShape:
        W = self.named_tensors()[0][1]
        m = self.named_tensors()[1][1].shape[0]
        if self.kind == "gru":
            m //= 2
        return CellShape(W.shape[1] - m, m)

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors())

    def copy(self):
        clone = _from_named(self.kind, [(n, t.data.copy()) for n, t in self.named_tensors()],
                            getattr(self, "ops", None))
        return clone

    def load_values(self, other: "_Params") -> None:
        for (_, mine), (_, theirs) in zip(self.named_tensors(), other.named_tensors()):
            mine.data[...] = theirs.data


@dataclass
class VanillaParams(_Params):
    W: Tensor
    b: Tensor
    kind = "vanilla"

    def named_tensors(self):
        return [("W", self.W), ("b", self.b)]


@dataclass
class GRUParams(_Params):
    W_u: Tensor
    b_u: Tensor
    W_v: Tensor
    b_v: Tensor
    kind = "gru"

    def named_tensors(self):
        return [("W_u", self.W_u), ("b_u", self.b_u), ("W_v", self.W_v), ("b_v", self.b_v)]


@dataclass
class MuFuRUParams(_Params):
    W_r: Tensor
    b_r: Tensor
    W_v: Tensor
    b_v: Tensor
    W_p: list[Tensor]
    b_p: list[Tensor]
    ops: tuple[str, ...] = field(default=("keep", "replace"))
    kind = "mufuru"

    def __post_init__(self):
        self.ops = check_ops(self.ops)
        if len(self.W_p) != len(self.ops) or len(self.b_p) != len(self.ops):
            raise ValueError("one controller weight/bias pair is required per operation")

    def named_tensors(self):
        named = [("W_r", self.W_r), ("b_r", self.b_r), ("W_v", self.W_v), ("b_v", self.b_v)]
        for op, W, b in zip(self.ops, self.W_p, self.b_p):
            named += [(f"W_p.{op}", W), (f"b_p.{op}", b)]
        return named


def _from_named(kind, arrays, ops=None):
    values = {name: T.parameter(a, name=name) for name, a in arrays}
    if kind == "vanilla":
        return VanillaParams(values["W"], values["b"])
    if kind == "gru":
        return GRUParams(values["W_u"], values["b_u"], values["W_v"], values["b_v"])
    if kind == "mufuru":
        ops = check_ops(ops)
        return MuFuRUParams(values["W_r"], values["b_r"], values["W_v"], values["b_v"],
                            [values[f"W_p.{op}"] for op in ops],
                            [values[f"b_p.{op}"] for op in ops], ops)
    raise ValueError(f"unknown cell kind {kind!r}")


def init_params(kind: str, shape: CellShape, ops: Sequence[str] | None = None,
                rng: np.random.Generator | None = None) -> _Params:
    """Glorot-uniform weights, zero biases."""
    if rng is None:
        rng = np.random.default_rng(0)
    n, m = shape.input_size, shape.state_size

    def weight(rows):
        limit = np.sqrt(6.0 / (rows + n + m))
        return rng.uniform(-limit, limit, size=(rows, n + m))

    if kind == "vanilla":
        return _from_named(kind, [("W", weight(m)), ("b", np.zeros(m))])
    if kind == "gru":
        return _from_named(kind, [("W_u", weight(2 * m)), ("b_u", np.zeros(2 * m)),
                                  ("W_v", weight(m)), ("b_v", np.zeros(m))])
    if kind == "mufuru":
        ops = check_ops(ops if ops is not None else ALL_OPS)
        arrays = [("W_r", weight(m)), ("b_r", np.zeros(m)), ("W_v", weight(m)), ("b_v", np.zeros(m))]
        for op in ops:
            arrays += [(f"W_p.{op}", weight(m)), (f"b_p.{op}", np.zeros(m))]
        return _from_named(kind, arrays, ops)
    raise ValueError(f"unknown cell kind {kind!r}")


# ---------------------------------------------------------------------------
# steps


def _check_inputs(shape: CellShape, x: Tensor, s: Tensor):
    if x.shape[-1] != shape.input_size or s.shape[-1] != shape.state_size or x.shape[:-1] != s.shape[:-1]:
        raise DimensionError(
            f"cell expects x[..., {shape.input_size}] and s[..., {shape.state_size}] "
            f"with matching batch extent, got {x.shape} and {s.shape}")


def _affine(W: Tensor, k: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(k, T.transpose(W)), b)


def vanilla_step(p: VanillaParams, x: Tensor, s: Tensor):
    _check_inputs(p.shape, x, s)
    h = T.tanh(_affine(p.W, T.concat_rows(x, s), p.b))
    return h, h


def gru_step(p: GRUParams, x: Tensor, s: Tensor):
    m = p.shape.state_size
    _check_inputs(p.shape, x, s)
    gates = T.sigmoid(_affine(p.W_u, T.concat_rows(x, s), p.b_u))
    r = T.slice_last(gates, 0, m)
    u = T.slice_last(gates, m, 2 * m)
    v = T.tanh(_affine(p.W_v, T.concat_rows(x, T.mul(r, s)), p.b_v))
    one_minus_u = T.sub(T.constant(np.ones(u.shape)), u)
    h = T.add(T.mul(u, s), T.mul(one_minus_u, v))
    return h, h


def _stacked_weights(p: MuFuRUParams, k: Tensor) -> Tensor:
    """Operation weights shaped ``[..., l, M]``, normalised over the ``l`` axis."""
    l, m = len(p.ops), p.shape.state_size
    if l == 1:
        W, b = p.W_p[0], p.b_p[0]
    else:
        W, b = T.concat(p.W_p, axis=0), T.concat(p.b_p, axis=0)
    logits = _affine(W, k, b)
    logits = T.reshape(logits, k.shape[:-1] + (l, m))
    return T.softmax(logits, axis=-2)


def mufuru_controller(p: MuFuRUParams, x: Tensor, s: Tensor) -> list[Tensor]:
    """Per-dimension operation weights ``p^1 .. p^l`` for controller ``k = [x; s]``."""
    _check_inputs(p.shape, x, s)
    weights = _stacked_weights(p, T.concat_rows(x, s))
    return [T.take(weights, j, axis=-2) for j in range(len(p.ops))]


def mufuru_step(p: MuFuRUParams, x: Tensor, s: Tensor, force_reset_one: bool = False,
                return_weights: bool = False):
    """One MuFuRU transition: the new state is a per-dimension convex
    combination of the composition operations applied to ``(s, v)``.

    With ``force_reset_one`` the reset gate is fixed at 1 (the reduction to a
    tanh cell). ``return_weights`` appends the ``[..., l, M]`` weight array.
    """
    _check_inputs(p.shape, x, s)
    k = T.concat_rows(x, s)
    if force_reset_one:
        reset_s = s
    else:
        reset_s = T.mul(T.sigmoid(_affine(p.W_r, k, p.b_r)), s)
    v = T.tanh(_affine(p.W_v, T.concat_rows(x, reset_s), p.b_v))
    weights = _stacked_weights(p, k)
    outputs = T.stack([COMPOSITION_OPS[op](s, v) for op in p.ops], axis=-2)
    h = T.total(T.mul(weights, outputs), axis=-2)
    if return_weights:
        return h, h, weights.data
    return h, h


def step(p: _Params, x: Tensor, s: Tensor, **kwargs):
    if isinstance(p, MuFuRUParams):
        return mufuru_step(p, x, s, **kwargs)
    if isinstance(p, GRUParams):
        return gru_step(p, x, s)
    if isinstance(p, VanillaParams):
        return vanilla_step(p, x, s)
    raise TypeError(f"not a cell parameter set: {type(p).__name__}")


@dataclass
class Unrolled:
    states: list[Tensor]
    outputs: list[Tensor]
    op_weights: list[np.ndarray] | None = None


def unroll(p: _Params, xs: Sequence[Tensor], s0: Tensor | None = None,
           masks: Sequence[np.ndarray | None] | None = None,
           record_weights: bool = False, force_reset_one: bool = False) -> Unrolled:
    """Apply the cell over ``xs``.

    ``masks[t]`` (shape ``[B, 1]`` or ``[B, M]``, values 0/1) freezes the state of
    padded batch rows so the last state equals the state at each row's true end.
    """
    if len(xs) == 0:
        raise ValueError("unroll needs a non-empty input sequence")
    m = p.shape.state_size
    if s0 is None:
        s0 = T.constant(np.zeros(xs[0].shape[:-1] + (m,)))
    mufuru = isinstance(p, MuFuRUParams)
    if force_reset_one and not mufuru:
        raise ValueError("force_reset_one only applies to MuFuRU cells")
    kwargs = {}
    if mufuru:
        kwargs = {"force_reset_one": force_reset_one, "return_weights": record_weights}
    states, outputs, weights = [], [], [] if record_weights and mufuru else None
    s = s0
    for t, x in enumerate(xs):
        result = step(p, x, s, **kwargs)
        new_s, h = result[0], result[1]
        if weights is not None:
            weights.append(result[2])
        mask = masks[t] if masks is not None else None
        if mask is not None and not np.all(mask):
            keep = np.broadcast_to(mask, new_s.shape).astype(np.float64)
            new_s = T.add(T.mul(T.constant(keep), new_s), T.mul(T.constant(1.0 - keep), s))
            h = new_s
        states.append(new_s)
        outputs.append(h)
        s = new_s
    return Unrolled(states, outputs, weights)


# ---------------------------------------------------------------------------
# reductions to simpler cells


def map_gru_to_mufuru(g: GRUParams) -> MuFuRUParams:
    """MuFuRU{keep, replace} that reproduces ``gru_step`` exactly.

    The keep logits are the GRU update-gate pre-activations and the replace
    logits are fixed at zero, so softmax([a, 0])[0] == sigmoid(a) == u.
    """
    m = g.shape.state_size
    W_u, b_u = g.W_u.data, g.b_u.data
    arrays = [("W_r", W_u[:m].copy()), ("b_r", b_u[:m].copy()),
              ("W_v", g.W_v.data.copy()), ("b_v", g.b_v.data.copy()),
              ("W_p.keep", W_u[m:].copy()), ("b_p.keep", b_u[m:].copy()),
              ("W_p.replace", np.zeros_like(g.W_v.data)), ("b_p.replace", np.zeros(m))]
    return _from_named("mufuru", arrays, ("keep", "replace"))


def map_vanilla_to_mufuru(p: VanillaParams) -> MuFuRUParams:
    """MuFuRU{replace} matching ``vanilla_step`` when stepped with ``force_reset_one=True``."""
    zeros = np.zeros_like(p.W.data)
    m = p.b.data.shape[0]
    arrays = [("W_r", zeros.copy()), ("b_r", np.zeros(m)),
              ("W_v", p.W.data.copy()), ("b_v", p.b.data.copy()),
              ("W_p.replace", zeros.copy()), ("b_p.replace", np.zeros(m))]
    return _from_named("mufuru", arrays, ("replace",))


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "mufuru-checkpoint"
CHECKPOINT_VERSION = 1


def checkpoint_dict(p: _Params, extra: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> dict:
    shape = p.shape
    record = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "cell": p.kind,
        "input_size": shape.input_size,
        "state_size": shape.state_size,
        "output_size": shape.output_size,
        "ops": list(getattr(p, "ops", [])),
        "tensors": [{"name": n, "shape": list(t.shape), "data": t.data.ravel().tolist()}
                    for n, t in p.named_tensors()],
        "extra": [{"name": n, "shape": list(np.shape(a)),
                   "data": np.asarray(a, dtype=np.float64).ravel().tolist()}
                  for n, a in (extra or {}).items()],
    }
    if meta:
        record["meta"] = meta
    return record


def save_checkpoint(path, p: _Params, extra: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    """Write a JSON checkpoint; floats use shortest round-trip repr, so reloading is bit-exact."""
    text = json.dumps(checkpoint_dict(p, extra, meta), indent=1, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_checkpoint(path):
    """Return ``(params, extra, meta)`` from a file written by :func:`save_checkpoint`."""
    try:
        record = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not a checkpoint ({exc})") from exc
    if record.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a checkpoint")
    if record.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {record.get('version')}")

    def arrays(entries):
        return [(e["name"], np.array(e["data"], dtype=np.float64).reshape(e["shape"]))
                for e in entries]

    params = _from_named(record["cell"], arrays(record["tensors"]), record["ops"] or None)
    extra = dict(arrays(record.get("extra", [])))
    return params, extra, record.get("meta", {})
