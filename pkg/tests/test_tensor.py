import math
import statistics

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gmoe import tensor as T
from gmoe.tensor import NonFiniteError, ShapeError, Tensor

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i][j] = s
    return np.array(out)


# matmul

def test_matmul_identity_and_zero():
    a = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)
    np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(np.zeros((3, 2)))).data, np.zeros((3, 2)))


def test_matmul_triple_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_matmul_matches_oracle_all_small_shapes(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-12)


def test_matmul_backward_rule():
    rng = np.random.default_rng(1)
    a, b = T.parameter(rng.standard_normal((4, 3))), T.parameter(rng.standard_normal((3, 2)))
    g = rng.standard_normal((4, 2))
    T.matmul(a, b).backward(g)
    np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-14)
    np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-14)


# softmax

def test_softmax_uniform_and_single():
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros(4))).data, [0.25] * 4)
    np.testing.assert_array_equal(T.softmax(Tensor(np.array([[3.7]]))).data, [[1.0]])


def test_softmax_exp_normalize_oracle():
    row = [0.9, 0.4, 0.1, 0.2]
    e = [math.exp(v) for v in row]
    expected = [v / sum(e) for v in e]
    np.testing.assert_allclose(T.softmax(Tensor(np.array(row))).data, expected, rtol=0, atol=1e-12)


def test_softmax_empty_axis_errors():
    with pytest.raises(ShapeError):
        T.softmax(Tensor(np.zeros((3, 0))))


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=finite), finite)
def test_softmax_sums_to_one_and_shift_invariant(x, c):
    s = T.softmax(Tensor(x), axis=1).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(T.softmax(Tensor(x + c), axis=1).data, s, atol=1e-9)


def test_softmax_large_logits_stable():
    s = T.softmax(Tensor(np.array([1000.0, 0.0]))).data
    np.testing.assert_allclose(s, [1.0, 0.0], atol=1e-300)


# layer norm

def _ln(x, d):
    return T.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d)))


def test_layer_norm_constant_row_is_zero():
    np.testing.assert_array_equal(_ln(np.full((1, 5), 3.0), 5).data, np.zeros((1, 5)))


def test_layer_norm_standardized_row_unchanged():
    x = np.array([[-1.0, 1.0, -1.0, 1.0]])
    np.testing.assert_allclose(_ln(x, 4).data, x, atol=1e-6)


def test_layer_norm_statistics_oracle():
    rng = np.random.default_rng(2)
    row = rng.standard_normal(7)
    mu = statistics.fmean(row)
    var = statistics.pvariance(row, mu)
    expected = [(v - mu) / math.sqrt(var + 1e-6) for v in row]
    np.testing.assert_allclose(_ln(row[None], 7).data[0], expected, atol=1e-10)


def test_layer_norm_errors():
    with pytest.raises(ShapeError):
        _ln(np.zeros((2, 0)), 0)
    with pytest.raises(ShapeError):
        T.layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(3)))


# elementwise

def test_relu_values():
    np.testing.assert_array_equal(T.relu(Tensor(np.array([-1.0, 2.0]))).data, [0.0, 2.0])


def test_l2_norm_pythagorean_and_zero():
    assert T.l2_norm(Tensor(np.array([3.0, 4.0]))).item() == 5.0
    z = T.parameter(np.zeros(3))
    n = T.l2_norm(z)
    assert n.item() == 0.0
    n.backward()
    np.testing.assert_array_equal(z.grad, np.zeros(3))


def test_gelu_matches_high_precision_erf():
    mpmath.mp.dps = 40
    xs = np.random.default_rng(3).uniform(-6, 6, 100)
    got = T.gelu(Tensor(xs)).data
    ref = [float(mpmath.mpf(x) * (1 + mpmath.erf(mpmath.mpf(x) / mpmath.sqrt(2))) / 2) for x in xs]
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-10)


def test_broadcasting_limited_to_scalars():
    a = Tensor(np.ones((2, 3)))
    np.testing.assert_array_equal(T.add(a, 2.0).data, np.full((2, 3), 3.0))
    np.testing.assert_array_equal(T.mul(a, Tensor(np.array(2.0))).data, np.full((2, 3), 2.0))
    with pytest.raises(ShapeError):
        T.add(a, Tensor(np.ones(3)))


def test_non_finite_names_the_op():
    with pytest.raises(NonFiniteError, match="log"):
        T.log(Tensor(np.array([0.0, 1.0])))
    with pytest.raises(NonFiniteError, match="div"):
        T.div(Tensor(np.ones(2)), Tensor(np.zeros(2)))


def test_tmax_gradient_goes_to_first_max():
    x = T.parameter(np.array([[1.0, 3.0, 3.0], [2.0, 0.0, 1.0]]))
    out = T.tmax(x, 1)
    np.testing.assert_array_equal(out.data, [3.0, 2.0])
    out.backward(np.ones(2))
    np.testing.assert_array_equal(x.grad, [[0, 1, 0], [1, 0, 0]])


# tape

def test_backward_visits_shared_nodes_once():
    x = T.parameter(np.array(2.0))
    y = T.mul(x, x)
    z = T.add(y, y)
    z.backward()
    assert x.grad == pytest.approx(8.0)


def test_tape_is_linear_in_losses():
    rng = np.random.default_rng(4)
    w = T.parameter(rng.standard_normal((3, 3)))
    x = Tensor(rng.standard_normal((2, 3)))

    def l1():
        return T.tsum(T.square(T.matmul(x, w)))

    def l2():
        return T.tsum(T.gelu(T.matmul(x, w)))

    l1().backward()
    g1 = w.grad.copy()
    w.grad = None
    l2().backward()
    g2 = w.grad.copy()
    w.grad = None
    T.add(l1(), l2()).backward()
    np.testing.assert_allclose(w.grad, g1 + g2, atol=1e-12)


def test_no_grad_records_nothing():
    x = T.parameter(np.ones(2))
    with T.no_grad():
        y = T.mul(x, x)
    assert y._backward is None and not y.requires_grad


def test_deep_chain_does_not_recurse():
    x = T.parameter(np.array(1.0))
    y = x
    for _ in range(5000):
        y = T.scale(y, 1.0)
    y.backward()
    assert x.grad == 1.0


# gradient checker

def test_gradient_check_square():
    x = T.parameter(np.array(3.0))
    assert T.gradient_check(lambda: T.square(x), [x]) < 1e-8


def test_gradient_check_constant_has_zero_gradient():
    x = T.parameter(np.array([1.0, 2.0]))
    c = Tensor(np.array(5.0))
    assert T.gradient_check(lambda: T.add(c, T.scale(T.tsum(x), 0.0)), [x]) == 0.0


def test_gradient_check_detects_wrong_backward():
    x = T.parameter(np.array([0.3, -0.7]))

    def bad():
        y = T.square(x)
        y._backward = lambda g: (g * 3.0 * x.data,)
        return T.tsum(y)

    assert T.gradient_check(bad, [x]) > 0.1


def test_gradient_check_rejects_non_finite():
    x = T.parameter(np.array(1.0))
    with pytest.raises(NonFiniteError):
        T.gradient_check(lambda: Tensor(np.array(np.inf)), [x])
