import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from agedit import tensor as T
from agedit.tensor import NonFiniteError, Tensor, grad_check


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


# elementwise ---------------------------------------------------------------

def test_add_componentwise():
    np.testing.assert_array_equal(T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_silu_zero_and_one():
    assert T.silu(Tensor([0.0])).data[0] == 0.0
    with T.precision("high"):
        got = T.silu(Tensor([1.0])).data[0]
    assert got == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), rel=1e-12)


@pytest.mark.parametrize("kind,expected", [("add", [4.0, 6.0]), ("sub", [-2.0, -2.0]), ("mul", [3.0, 8.0])])
def test_elementwise_dispatch(kind, expected):
    np.testing.assert_allclose(T.elementwise(kind, Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, expected)


def test_elementwise_unary_dispatch():
    np.testing.assert_allclose(T.elementwise("square", Tensor([3.0])).data, [9.0])
    np.testing.assert_allclose(T.elementwise("sqrt", Tensor([9.0])).data, [3.0])
    np.testing.assert_allclose(T.elementwise("scale", Tensor([2.0]), 1.5).data, [3.0])


def test_elementwise_rejects_unknown_kind():
    with pytest.raises(ValueError):
        T.elementwise("pow", Tensor([1.0]), Tensor([1.0]))


def test_only_scalar_broadcasting():
    np.testing.assert_allclose(T.add(Tensor([1.0, 2.0]), 1.0).data, [2.0, 3.0])
    with pytest.raises(ValueError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


def test_non_finite_output_is_an_error():
    with pytest.raises(NonFiniteError):
        T.sqrt(Tensor([-1.0]))
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


# matmul --------------------------------------------------------------------

def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for r in range(k):
                out[i, j] += a[i, r] * b[r, j]
    return out


def test_matmul_identity_and_pick():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)
    np.testing.assert_array_equal(T.matmul(Tensor([[1.0, 0.0]]), Tensor([[0.0], [5.0]])).data, [[0.0]])


def test_matmul_against_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    with T.precision("high"):
        got = T.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(got, naive_matmul(a, b), rtol=1e-12)


def test_matmul_dimension_mismatch():
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_matmul_associative(m, k, n, p, seed):
    r = np.random.default_rng(seed)
    a, b, c = r.normal(size=(m, k)), r.normal(size=(k, n)), r.normal(size=(n, p))
    with T.precision("high"):
        left = T.matmul(T.matmul(Tensor(a), Tensor(b)), Tensor(c)).data
        right = T.matmul(Tensor(a), T.matmul(Tensor(b), Tensor(c))).data
    oracle = naive_matmul(naive_matmul(a, b), c)
    scale = max(1.0, np.abs(oracle).max())
    assert np.abs(left - oracle).max() / scale < 1e-9
    assert np.abs(right - oracle).max() / scale < 1e-9


# softmax -------------------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    with T.precision("high"):
        np.testing.assert_allclose(T.softmax_rows(Tensor([[math.log(2.0), 0.0]])).data, [[2 / 3, 1 / 3]],
                                   rtol=1e-12)
    np.testing.assert_allclose(T.softmax_rows(Tensor([[1000.0, 1000.0]])).data, [[0.5, 0.5]])


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=finite), finite)
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    with T.precision("high"):
        p = T.softmax_rows(Tensor(x)).data
        q = T.softmax_rows(Tensor(x + c)).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)
    np.testing.assert_allclose(p, q, atol=1e-9)


# layer norm ----------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    out = T.layer_norm(Tensor([[3.0, 3.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, np.zeros((1, 3)))


def test_layer_norm_already_normalised():
    with T.precision("high"):
        out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-9)


def test_layer_norm_two_pass_oracle(rng):
    x = rng.normal(2.0, 3.0, size=(4, 10))
    with T.precision("high"):
        out = T.layer_norm(Tensor(x), Tensor(np.ones(10)), Tensor(np.zeros(10)), eps=1e-5).data
    for row, got in zip(x, out):
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        np.testing.assert_allclose(got, (row - mu) / math.sqrt(var + 1e-5), rtol=1e-10)
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-5)


def test_layer_norm_errors():
    with pytest.raises(ValueError):
        T.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    with pytest.raises(ValueError):
        T.layer_norm(Tensor(np.ones((2, 0))), Tensor(np.ones(0)), Tensor(np.zeros(0)))


# backward ------------------------------------------------------------------

def test_power_rule():
    x = leaf(3.0)
    with T.Tape() as tape:
        loss = T.square(x)
    tape.backward(loss)
    assert x.grad == pytest.approx(6.0)


def test_untracked_input_gets_no_grad():
    x, y = leaf([1.0, 2.0]), Tensor([3.0, 4.0])
    with T.Tape() as tape:
        loss = T.sum(T.mul(x, y))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [3.0, 4.0])
    assert y.grad is None


def test_backward_requires_scalar_and_single_use():
    x = leaf([1.0, 2.0])
    with T.Tape() as tape:
        out = T.square(x)
    with pytest.raises(ValueError):
        tape.backward(out)
    with T.Tape() as tape:
        loss = T.sum(T.square(x))
    tape.backward(loss)
    with pytest.raises(RuntimeError):
        tape.backward(loss)
    tape.reset()
    assert len(tape) == 0 and not tape.consumed
    with tape:
        T.square(x)
    assert len(tape) == 1


def test_reused_input_accumulates():
    x = leaf(2.0)
    with T.Tape() as tape:
        loss = T.add(T.mul(x, x), x)
    tape.backward(loss)
    assert x.grad == pytest.approx(5.0)


def test_sum_of_products_matches_finite_differences(rng):
    with T.precision("high"):
        a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(3, 4)))
        report = grad_check(lambda a, b: T.sum(T.mul(a, b)), [a, b], step=1e-5)
    assert report.passed and report.probes == 24


def test_grad_check_linear_is_exact(rng):
    with T.precision("high"):
        w = Tensor(rng.normal(size=(5,)))
        x = leaf(rng.normal(size=(5,)))
        report = grad_check(lambda x: T.sum(T.mul(x, w)), [x])
    assert report.max_rel_error < 1e-8


def test_grad_check_flags_a_wrong_gradient(rng):
    def bad(x):
        out = T.square(x)
        out_back = T._result(out.data, (x,), lambda g: (g * 0.0,), "bad")
        return T.sum(out_back)
    with T.precision("high"):
        report = grad_check(bad, [leaf(rng.normal(size=4) + 3.0)])
    assert not report.passed


def test_default_single_precision_and_high_mode():
    assert Tensor([1.0]).dtype == np.float32
    with T.precision("high"):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_operations_are_deterministic(rng):
    x = rng.normal(size=(6, 7)).astype(np.float32)
    w = rng.normal(size=(7, 3)).astype(np.float32)
    a = T.softmax_rows(T.matmul(Tensor(x), Tensor(w))).data
    b = T.softmax_rows(T.matmul(Tensor(x), Tensor(w))).data
    assert a.tobytes() == b.tobytes()
