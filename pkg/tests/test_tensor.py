import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mufuru import tensor as T
from mufuru.errors import DimensionError, DomainError
from mufuru.tensor import Tensor


def leaf(a):
    return T.parameter(np.array(a, dtype=float))


def rand(rng, *shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


# -- matmul -------------------------------------------------------------------

def test_matmul_identity():
    out = T.matmul(T.constant(np.eye(2)), T.constant([[1, 2], [3, 4]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_projector():
    out = T.matmul(T.constant([[1, 0], [0, 0]]), T.constant([[5], [7]]))
    np.testing.assert_array_equal(out.data, [[5], [0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(T.constant(np.ones((2, 3))), T.constant(np.ones((2, 2))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    A, B = leaf(rand(rng, 3, 3)), leaf(rand(rng, 3, 3))
    assert T.grad_check(lambda ps: T.total(T.matmul(ps[0], ps[1])), [A, B]) <= 1e-6


def test_matmul_backward_rule():
    rng = np.random.default_rng(1)
    A, B = leaf(rand(rng, 2, 3)), leaf(rand(rng, 3, 4))
    T.backward(T.total(T.matmul(A, B)))
    np.testing.assert_allclose(A.grad, np.ones((2, 4)) @ B.data.T)
    np.testing.assert_allclose(B.grad, A.data.T @ np.ones((2, 4)))


@pytest.mark.parametrize("shapes", [((3, 4), (4,)), ((4,), (4, 2)), ((4,), (4,))])
def test_matmul_vector_operands(shapes):
    rng = np.random.default_rng(2)
    a, b = leaf(rand(rng, *shapes[0])), leaf(rand(rng, *shapes[1]))
    assert T.grad_check(lambda ps: T.total(T.tanh(T.matmul(ps[0], ps[1]))), [a, b]) <= 1e-6


# -- elementwise --------------------------------------------------------------

def test_tanh_zero():
    assert T.tanh(T.constant([0.0])).data[0] == 0.0


def test_sigmoid_zero():
    assert T.sigmoid(T.constant([0.0])).data[0] == 0.5


def test_max_definition():
    np.testing.assert_array_equal(T.maximum(T.constant([1, 4]), T.constant([3, 2])).data, [3, 4])


def test_sigmoid_extremes_are_finite():
    out = T.sigmoid(T.constant([-800.0, 800.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == 0.0 and out[1] == 1.0


def test_binary_shape_mismatch():
    with pytest.raises(DimensionError):
        T.add(T.constant(np.ones(3)), T.constant(np.ones(4)))


def test_log_domain_error():
    with pytest.raises(DomainError):
        T.log(T.constant([1.0, 0.0]))


@pytest.mark.parametrize("kind", ["max", "min"])
def test_ties_route_gradient_to_first_operand(kind):
    a, b = leaf([1.0, 2.0]), leaf([1.0, 2.0])
    T.backward(T.total(T.elementwise(kind, a, b)))
    np.testing.assert_array_equal(a.grad, [1.0, 1.0])
    np.testing.assert_array_equal(b.grad, [0.0, 0.0])


def test_batch_axis_broadcast():
    rng = np.random.default_rng(3)
    x, b = leaf(rand(rng, 5, 3)), leaf(rand(rng, 3))
    out = T.add(x, b)
    np.testing.assert_allclose(out.data, x.data + b.data)
    assert T.grad_check(lambda ps: T.total(T.tanh(T.add(ps[0], ps[1]))), [x, b]) <= 1e-6


UNARY = ["tanh", "sigmoid", "neg", "abs", "exp", "log", "scale"]
BINARY = ["add", "sub", "mul", "max", "min"]


@pytest.mark.parametrize("kind", UNARY)
@pytest.mark.parametrize("seed", range(5))
def test_unary_gradients(kind, seed):
    rng = np.random.default_rng(seed)
    x = rand(rng, 4, 3)
    if kind == "log":
        x = np.abs(x) + 0.1
    if kind == "abs":
        x = np.where(np.abs(x) < 1e-3, 0.5, x)
    p = leaf(x)
    w = T.constant(rand(rng, 4, 3))
    err = T.grad_check(lambda ps: T.total(T.mul(T.elementwise(kind, ps[0], c=1.7), w)), [p])
    assert err <= 1e-6


@pytest.mark.parametrize("kind", BINARY)
@pytest.mark.parametrize("seed", range(5))
def test_binary_gradients(kind, seed):
    rng = np.random.default_rng(seed)
    a, b = rand(rng, 4, 3), rand(rng, 4, 3)
    b = np.where(np.abs(a - b) < 1e-3, b + 0.1, b)
    pa, pb = leaf(a), leaf(b)
    w = T.constant(rand(rng, 4, 3))
    err = T.grad_check(lambda ps: T.total(T.mul(T.elementwise(kind, ps[0], ps[1]), w)), [pa, pb])
    assert err <= 1e-6


# -- structural ----------------------------------------------------------------

def test_concat_rows():
    np.testing.assert_array_equal(T.concat_rows(T.constant([1, 2]), T.constant([3])).data, [1, 2, 3])


def test_concat_with_empty_is_identity():
    x = T.constant([4.0, 5.0])
    np.testing.assert_array_equal(T.concat_rows(x, T.constant(np.zeros(0))).data, x.data)


def test_concat_split_rule():
    a, b = leaf([1.0, 2.0]), leaf([3.0, 4.0])
    T.backward(T.total(T.slice_last(T.concat_rows(a, b), 0, 2)))
    np.testing.assert_array_equal(a.grad, [1, 1])
    np.testing.assert_array_equal(b.grad, [0, 0])


def test_concat_batch_mismatch():
    with pytest.raises(DimensionError):
        T.concat_rows(T.constant(np.ones((2, 3))), T.constant(np.ones((3, 3))))


@pytest.mark.parametrize("seed", range(3))
def test_structural_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rand(rng, 3, 2)), leaf(rand(rng, 3, 4))
    w = T.constant(rand(rng, 2, 3, 3))

    def f(ps):
        joined = T.concat([ps[0], ps[1]], axis=-1)                 # 3 x 6
        stacked = T.stack([T.slice_last(joined, 0, 3), T.slice_last(joined, 3, 6)])
        sm = T.softmax(stacked, axis=0)
        return T.total(T.mul(T.reshape(T.transpose(T.take(sm, 1)), (3, 3)), T.take(w, 0)))

    assert T.grad_check(f, [a, b]) <= 1e-6


def test_embedding_gradient_scatters():
    table = leaf(np.arange(6.0).reshape(3, 2))
    out = T.embedding(table, [2, 0, 2])
    np.testing.assert_array_equal(out.data, [[4, 5], [0, 1], [4, 5]])
    T.backward(T.total(out))
    np.testing.assert_array_equal(table.grad, [[1, 1], [0, 0], [2, 2]])


# -- softmax_over_stack -------------------------------------------------------

def test_softmax_two_equal():
    p = T.softmax_over_stack([T.constant([0.0]), T.constant([0.0])])
    assert [float(x.data[0]) for x in p] == [0.5, 0.5]


def test_softmax_three_uniform():
    p = T.softmax_over_stack([T.constant([0.0])] * 3)
    for x in p:
        assert x.data[0] == pytest.approx(1 / 3, abs=1e-15)


def test_softmax_two_is_sigmoid_of_difference():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=5), rng.normal(size=5)
    p1, p2 = T.softmax_over_stack([T.constant(a), T.constant(b)])
    sig = lambda z: 1.0 / (1.0 + np.exp(-z))  # noqa: E731
    np.testing.assert_allclose(p1.data, sig(a - b), rtol=0, atol=1e-15)
    np.testing.assert_allclose(p2.data, sig(b - a), rtol=0, atol=1e-15)


def test_softmax_empty():
    with pytest.raises(ValueError):
        T.softmax_over_stack([])


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_softmax_stable_for_large_logits(l, seed):
    rng = np.random.default_rng(seed)
    logits = [T.constant(rng.uniform(-1e3, 1e3, size=6)) for _ in range(l)]
    weights = np.stack([p.data for p in T.softmax_over_stack(logits)])
    assert np.all(np.isfinite(weights))
    assert np.all(weights >= 0)
    np.testing.assert_allclose(weights.sum(axis=0), 1.0, rtol=0, atol=1e-12)


def test_softmax_positive_for_moderate_logits():
    rng = np.random.default_rng(5)
    weights = np.stack([p.data for p in T.softmax_over_stack(
        [T.constant(rng.uniform(-20, 20, 10)) for _ in range(7)])])
    assert np.all(weights > 0)


# -- backward -----------------------------------------------------------------

def test_backward_leaf_identity():
    x = leaf(3.0)
    T.backward(x)
    assert x.grad == 1.0


def test_backward_fan_out_accumulates():
    x = leaf(3.0)
    T.backward(T.add(x, x))
    assert x.grad == 2.0


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError):
        T.backward(T.tanh(leaf([1.0, 2.0])))


def test_backward_tanh_matvec():
    rng = np.random.default_rng(6)
    W, x = leaf(rand(rng, 4, 3)), T.constant(rand(rng, 3))
    assert T.grad_check(lambda ps: T.total(T.tanh(T.matmul(ps[0], x))), [W]) <= 1e-6


def test_backward_populates_intermediates():
    x = leaf([0.3, -0.2])
    h = T.tanh(x)
    T.backward(T.total(h))
    assert h.grad is not None and h.grad.shape == h.shape
    assert x.grad.shape == x.shape


def test_tape_is_topologically_ordered():
    x = leaf([0.5])
    y = T.mul(T.tanh(x), T.sigmoid(x))
    tape = T.Tape.record(T.total(T.add(y, x)))
    position = {id(t): i for i, t in enumerate(tape.entries)}
    for i, node in enumerate(tape.entries):
        for parent in node._parents:
            if parent.requires_grad:
                assert position[id(parent)] < i


@pytest.mark.parametrize("seed", range(5))
def test_shared_subexpression_equals_duplicated_tree(seed):
    rng = np.random.default_rng(seed)
    W0, x = rand(rng, 3, 3), T.constant(rand(rng, 3))

    W = leaf(W0)
    shared = T.tanh(T.matmul(W, x))
    T.backward(T.total(T.mul(shared, shared)))
    dag = W.grad.copy()

    W = leaf(W0)
    T.backward(T.total(T.mul(T.tanh(T.matmul(W, x)), T.tanh(T.matmul(W, x)))))
    np.testing.assert_allclose(dag, W.grad, rtol=1e-14, atol=1e-15)


def test_no_grad_skips_recording():
    x = leaf([1.0])
    with T.no_grad():
        y = T.tanh(x)
    assert not y.requires_grad


# -- cross entropy ---------------------------------------------------------------

def test_cross_entropy_uniform_is_log_c():
    assert float(T.cross_entropy(T.constant(np.zeros(7)), 3).data) == pytest.approx(np.log(7))


def test_cross_entropy_saturated():
    assert float(T.cross_entropy(T.constant([1e6, 0.0]), 0).data) == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_target_range():
    with pytest.raises(ValueError):
        T.cross_entropy(T.constant(np.zeros(3)), 3)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(7)
    z = leaf(rng.normal(size=5))
    T.backward(T.cross_entropy(z, 2))
    p = np.exp(z.data) / np.exp(z.data).sum()
    np.testing.assert_allclose(z.grad, p - np.eye(5)[2], atol=1e-15)
    assert T.grad_check(lambda ps: T.cross_entropy(ps[0], 2), [z]) <= 1e-6


def test_cross_entropy_batched_mean():
    rng = np.random.default_rng(8)
    z = leaf(rng.normal(size=(4, 3)))
    targets = np.array([0, 2, 1, 1])
    single = [float(T.cross_entropy(T.constant(z.data[i]), targets[i]).data) for i in range(4)]
    assert float(T.cross_entropy(z, targets).data) == pytest.approx(np.mean(single))
    assert T.grad_check(lambda ps: T.cross_entropy(ps[0], targets), [z]) <= 1e-6


# -- grad_check ----------------------------------------------------------------

def test_grad_check_square():
    theta = leaf(3.0)
    assert T.grad_check(lambda ps: T.mul(ps[0], ps[0]), [theta]) <= 1e-8


def test_grad_check_constant_function():
    theta = leaf([1.0, 2.0])
    assert T.grad_check(lambda ps: T.constant(4.0), [theta]) == 0.0


def test_grad_check_propagates_nan():
    theta = leaf([1.0])
    assert np.isnan(T.grad_check(lambda ps: T.total(T.scale(ps[0], np.nan)), [theta]))


def test_grad_check_detects_wrong_rule(monkeypatch):
    fwd, _ = T.UNARY["tanh"]
    monkeypatch.setitem(T.UNARY, "tanh", (fwd, lambda x, y, g, c: g * (1.0 - y)))
    x = leaf([0.3, -0.4])
    assert T.grad_check(lambda ps: T.total(T.tanh(ps[0])), [x]) > 1e-2


def test_operator_sugar():
    a, b = leaf([1.0, 2.0]), leaf([3.0, 5.0])
    out = (a * b + 1.0 - a) * 2.0
    np.testing.assert_array_equal(out.data, [6.0, 18.0])
    assert isinstance(out, Tensor)
