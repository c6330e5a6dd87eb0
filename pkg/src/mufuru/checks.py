"""Verification routines behind the ``gradcheck`` and ``equivalence`` commands."""

from __future__ import annotations

import numpy as np

from . import cells
from . import tensor as T

GRADCHECK_THRESHOLD = 1e-4
EQUIVALENCE_THRESHOLD = 1e-10


def gradcheck_report(kind: str, hidden_size: int = 4, input_size: int = 4, seed: int = 0,
                     ops=None, steps: int = 5, num_classes: int = 3,
                     eps: float = 1e-5) -> dict[str, float]:
    """Max relative gradient error per parameter group for a random unrolled sequence.

    The loss is the summed cross-entropy of a linear read-out at every step, so
    gradients reach every parameter through every time step.
    """
    rng = np.random.default_rng(seed)
    shape = cells.CellShape(input_size, hidden_size)
    params = cells.init_params(kind, shape, ops, rng)
    for name, t in params.named_tensors():
        if name.startswith("b"):
            t.data[...] = rng.uniform(-0.5, 0.5, t.shape)
    W_c = T.parameter(rng.uniform(-1, 1, (num_classes, hidden_size)), "W_c")
    s0 = T.parameter(rng.uniform(-1, 1, hidden_size), "s0")
    xs = [T.constant(rng.normal(size=input_size)) for _ in range(steps)]
    targets = rng.integers(0, num_classes, size=steps)

    def loss_fn(_):
        run = cells.unroll(params, xs, s0=s0)
        losses = [T.cross_entropy(T.matmul(W_c, h), int(y)) for h, y in zip(run.outputs, targets)]
        return T.total(T.stack(losses))

    named = params.named_tensors() + [("W_c", W_c), ("s0", s0)]
    return T.grad_check_groups(loss_fn, [t for _, t in named], eps, [n for n, _ in named])


def _random_like(params, rng, zero):
    for _, t in params.named_tensors():
        t.data[...] = 0.0 if zero else rng.uniform(-1, 1, t.shape)
    return params


def _trajectory(params, xs, s0, **kwargs):
    with T.no_grad():
        return np.stack([s.data for s in cells.unroll(params, xs, s0=s0, **kwargs).states])


def equivalence_report(seed: int = 0, trials: int = 100, steps: int = 20,
                       zero_params: bool = False) -> dict[str, float]:
    """Largest element-wise deviation between each simple cell and its MuFuRU reduction."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    rng = np.random.default_rng(seed)
    worst = {"gru": 0.0, "vanilla": 0.0}
    for _ in range(trials):
        n, m = (int(v) for v in rng.integers(1, 9, size=2))
        shape = cells.CellShape(n, m)
        xs = [T.constant(rng.normal(size=n)) for _ in range(steps)]
        s0 = T.constant(rng.uniform(-1, 1, m))

        gru = _random_like(cells.init_params("gru", shape, rng=rng), rng, zero_params)
        ref = _trajectory(gru, xs, s0)
        got = _trajectory(cells.map_gru_to_mufuru(gru), xs, s0)
        worst["gru"] = max(worst["gru"], float(np.max(np.abs(ref - got))))

        vanilla = _random_like(cells.init_params("vanilla", shape, rng=rng), rng, zero_params)
        ref = _trajectory(vanilla, xs, s0)
        got = _trajectory(cells.map_vanilla_to_mufuru(vanilla), xs, s0, force_reset_one=True)
        worst["vanilla"] = max(worst["vanilla"], float(np.max(np.abs(ref - got))))
    return worst
