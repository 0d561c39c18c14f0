import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dtr import autograd as ag
from dtr.autograd import Tensor, backward, detach, tensor
from dtr.rng import SplitMix64

from conftest import grad_check, rand_tensor


def test_matmul_identity():
    a = tensor([[1, 2], [3, 4]])
    assert np.array_equal(ag.matmul(a, tensor(np.eye(2))).data, [[1, 2], [3, 4]])


def test_matmul_by_hand():
    assert ag.matmul(tensor([[1, 0]]), tensor([[2], [3]])).data.tolist() == [[2.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ag.DimensionError, match=r"\[2, 3\].*\[2, 3\]"):
        ag.matmul(tensor(np.ones((2, 3))), tensor(np.ones((2, 3))))


def test_matmul_finite_differences(rng):
    a, b = rand_tensor(rng, 3, 4), rand_tensor(rng, 4, 2)
    w = Tensor(rng.uniform(6, -1, 1).reshape(3, 2))
    assert grad_check(lambda: ag.sum(ag.mul(ag.matmul(a, b), w)), [a, b]) < 1e-6


def test_relu_exp_log_examples():
    assert ag.relu(tensor([-1, 0, 2])).data.tolist() == [0, 0, 2]
    assert ag.exp(tensor([0.0])).data.tolist() == [1.0]
    x = tensor([2.0], requires_grad=True)
    backward(ag.sum(ag.log(x)))
    assert abs(x.grad[0] - 0.5) < 1e-9


def test_log_domain_error():
    with pytest.raises(ag.DomainError):
        ag.log(tensor([1.0, -0.5]))
    # exact zero is inside the guard
    assert ag.log(tensor([0.0])).item() == pytest.approx(math.log(1e-12))


def test_binary_shape_mismatch():
    with pytest.raises(ag.DimensionError):
        ag.add(tensor([1.0, 2.0]), tensor([1.0]))
    with pytest.raises(ag.DimensionError):
        ag.mul(tensor([[1.0]]), tensor([1.0]))


def test_softmax_examples():
    assert np.allclose(ag.softmax_rows(tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    big = ag.softmax_rows(tensor([[1000.0, 0.0]])).data
    assert np.isfinite(big).all() and big[0, 0] == pytest.approx(1.0) and big[0, 1] < 1e-300
    rows = ag.softmax_rows(Tensor(SplitMix64(3).normal(50).reshape(5, 10))).data.sum(axis=1)
    assert np.all(np.abs(rows - 1) < 1e-9)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    out = ag.softmax_rows(Tensor(x)).data
    assert np.all(np.abs(out.sum(axis=1) - 1.0) < 1e-9)
    assert np.all(out >= 0)


def test_backward_linear_and_square():
    x = tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward(ag.sum(x))
    assert x.grad.tolist() == [1, 1, 1]
    y = tensor([1.0, 2.0], requires_grad=True)
    backward(ag.sum(ag.mul(y, y)))
    assert y.grad.tolist() == [2, 4]


def test_backward_requires_scalar():
    x = tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        backward(ag.mul(x, x))


def test_backward_accumulates_exactly(rng):
    x = rand_tensor(rng, 4, 3)
    w = rand_tensor(rng, 2, 3)

    def loss():
        return ag.sum(ag.relu(ag.linear(x, w)))

    backward(loss())
    once = w.grad.copy()
    backward(loss())
    assert np.array_equal(w.grad, 2 * once)


def test_diamond_graph_visits_each_node_once():
    calls = []
    x = tensor([1.5, -0.5], requires_grad=True)

    def traced(t):
        return ag.custom(t, t.data * 3.0, lambda g: (calls.append(1), g * 3.0)[1], "traced")

    h = traced(x)
    loss = ag.sum(ag.add(ag.mul(h, h), h))  # h feeds three edges
    backward(loss)
    assert len(calls) == 1
    assert np.allclose(x.grad, 3.0 * (2 * 3.0 * x.data + 1.0))


def test_detach_blocks_gradient():
    x = tensor([1.0, 2.0], requires_grad=True)
    w = tensor([3.0, -1.0], requires_grad=True)
    backward(ag.sum(ag.mul(detach(x), w)))
    assert x.grad is None
    assert w.grad.tolist() == [1.0, 2.0]


def test_detach_idempotent():
    x = tensor([1.0, 2.0], requires_grad=True)
    d1 = detach(x)
    d2 = detach(d1)
    assert np.array_equal(d1.data, d2.data) and not d2.requires_grad and d2.is_leaf


def test_shape_values_invariant(rng):
    t = rand_tensor(rng, 3, 5)
    assert int(np.prod(t.shape)) == t.values.size
    backward(ag.sum(t))
    assert t.grad.size == t.values.size


def test_non_finite_results_rejected():
    with pytest.raises(ag.NonFiniteError):
        ag.exp(tensor([1000.0]))


def test_empty_batch_ops():
    x = Tensor(np.zeros((0, 3)), requires_grad=True)
    w = Tensor(np.ones((2, 3)), requires_grad=True)
    out = ag.softmax_rows(ag.linear(x, w))
    assert out.shape == (0, 2)
    assert ag.mean(out).item() == 0.0


# one builder per differentiable op; each returns (scalar loss fn, params)
def _op_cases(rng):
    def weights(*shape):
        return Tensor(rng.uniform(int(np.prod(shape)), -1, 1).reshape(shape))

    a, b = rand_tensor(rng, 3, 4), rand_tensor(rng, 3, 4)
    w = weights(3, 4)
    w43 = weights(4, 3)
    cases = {
        "add": (lambda: ag.sum(ag.mul(ag.add(a, b), w)), [a, b]),
        "sub": (lambda: ag.sum(ag.mul(ag.sub(a, b), w)), [a, b]),
        "mul": (lambda: ag.sum(ag.mul(ag.mul(a, b), w)), [a, b]),
        "neg": (lambda: ag.sum(ag.mul(ag.neg(a), w)), [a]),
        "scale": (lambda: ag.sum(ag.mul(ag.scale(a, -1.7), w)), [a]),
        "relu": (lambda: ag.sum(ag.mul(ag.relu(a), w)), [a]),
        "exp": (lambda: ag.sum(ag.mul(ag.exp(a), w)), [a]),
        "sigmoid": (lambda: ag.sum(ag.mul(ag.sigmoid(a), w)), [a]),
        "mean": (lambda: ag.mean(ag.mul(a, b)), [a, b]),
        "transpose": (lambda: ag.sum(ag.mul(ag.transpose(a), w43)), [a]),
        "softmax_rows": (lambda: ag.sum(ag.mul(ag.softmax_rows(a), w)), [a]),
    }
    pos = Tensor(rng.uniform(12, 0.5, 2.0).reshape(3, 4), requires_grad=True)
    cases["log"] = (lambda: ag.sum(ag.mul(ag.log(pos), w)), [pos])
    m1, m2 = rand_tensor(rng, 3, 4), rand_tensor(rng, 4, 2)
    w32 = weights(3, 2)
    cases["matmul"] = (lambda: ag.sum(ag.mul(ag.matmul(m1, m2), w32)), [m1, m2])
    lw = rand_tensor(rng, 5, 4)
    w35 = weights(3, 5)
    cases["linear"] = (lambda: ag.sum(ag.mul(ag.linear(a, lw), w35)), [a, lw])
    bias = rand_tensor(rng, 4)
    cases["add_rowvec"] = (lambda: ag.sum(ag.mul(ag.add_rowvec(a, bias), w)), [a, bias])
    idx = rng.integers(4, 3)
    w3 = weights(3)
    cases["pick"] = (lambda: ag.sum(ag.mul(ag.pick(a, idx), w3)), [a])
    rows = [2, 0, 2, 1]
    w44 = weights(4, 4)
    cases["take_rows"] = (lambda: ag.sum(ag.mul(ag.take_rows(a, rows), w44)), [a])
    c = rand_tensor(rng, 3, 2)
    w36 = weights(3, 6)
    cases["concat_cols"] = (lambda: ag.sum(ag.mul(ag.concat_cols(a, c), w36)), [a, c])
    r2 = rand_tensor(rng, 2, 4)
    w54 = weights(5, 4)
    cases["concat_rows"] = (lambda: ag.sum(ag.mul(ag.concat_rows(a, r2), w54)), [a, r2])
    f, p = rand_tensor(rng, 3, 2), rand_tensor(rng, 3, 5)
    w310 = weights(3, 10)
    cases["outer_rows"] = (lambda: ag.sum(ag.mul(ag.outer_rows(f, p), w310)), [f, p])
    return cases


OPS = sorted(_op_cases(SplitMix64(0)))


@pytest.mark.parametrize("op", OPS)
def test_every_op_matches_finite_differences(op):
    worst = 0.0
    for trial in range(100):
        fn, params = _op_cases(SplitMix64(trial, stream=17))[op]
        worst = max(worst, grad_check(fn, params))
    assert worst < 1e-4, f"{op}: max relative error {worst:.2e}"
