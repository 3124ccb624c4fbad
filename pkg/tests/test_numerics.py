import math
import zlib

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sspe_vit import numerics as nx
from sspe_vit.numerics import Tensor, grad_check


def _mp_softmax(row):
    mpmath.mp.dps = 50
    e = [mpmath.e ** mpmath.mpf(v) for v in row]
    s = mpmath.fsum(e)
    return [float(v / s) for v in e]


class TestSoftmaxRows:
    def test_symmetric_row(self):
        np.testing.assert_array_equal(nx.softmax_rows(np.array([[0.0, 0.0]])), [[0.5, 0.5]])

    def test_large_logits_do_not_overflow(self):
        out = nx.softmax_rows(np.array([[1000.0, 1000.0]]))
        np.testing.assert_array_equal(out, [[0.5, 0.5]])

    def test_against_extended_precision(self):
        expected = _mp_softmax([1, 2, 3])
        np.testing.assert_allclose(expected, [0.0900, 0.2447, 0.6652], atol=1e-4)
        np.testing.assert_allclose(nx.softmax_rows(np.array([[1.0, 2.0, 3.0]]))[0], expected, atol=1e-15)

    def test_empty_input(self):
        with pytest.raises(ValueError, match="empty input"):
            nx.softmax_rows(np.zeros((0, 3)))

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)),
                  elements=st.floats(-1e3, 1e3)))
    def test_rows_sum_to_one(self, m):
        out = nx.softmax_rows(m)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(out >= 0) and np.all(out <= 1)
        # exp underflows to 0 once a row spans more than ~745
        spread = m.max(axis=1) - m.min(axis=1)
        assert np.all(out[spread < 700] > 0)


class TestLayerNorm:
    def test_constant_row(self):
        out = nx.layer_norm(np.array([[1.0, 1.0, 1.0]]), np.ones(3), np.zeros(3))
        np.testing.assert_array_equal(out, [[0.0, 0.0, 0.0]])

    def test_two_values_closed_form(self):
        out = nx.layer_norm(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2), eps=1e-12)
        np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-5)

    def test_affine(self):
        out = nx.layer_norm(np.array([[0.0, 2.0]]), np.full(2, 2.0), np.ones(2))
        np.testing.assert_allclose(out, [[-1.0, 3.0]], atol=1e-5)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            nx.layer_norm(np.zeros((2, 3)), np.ones(2), np.zeros(3))

    def test_moments(self):
        rng = np.random.default_rng(0)
        x = rng.normal(3.0, 5.0, (10, 16))
        out = nx.layer_norm(x, np.ones(16), np.zeros(16), eps=1e-14)
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-8)


class TestGelu:
    def test_zero(self):
        assert nx.gelu(np.array(0.0)) == 0.0

    def test_asymptote(self):
        assert abs(float(nx.gelu(np.array(10.0))) - 10.0) < 1e-6

    def test_matches_x_times_normal_cdf(self):
        xs = np.linspace(-6, 6, 121)
        oracle = [x * 0.5 * (1 + math.erf(x / math.sqrt(2))) for x in xs]
        np.testing.assert_allclose(nx.gelu(xs), oracle, atol=1e-14)
        assert abs(float(nx.gelu(np.array(1.0))) - 0.8413) < 1e-3

    def test_monotone_on_grid(self):
        # exact GELU has its minimum near -0.7518
        xs = np.linspace(-0.75, 8, 2000)
        assert np.all(np.diff(nx.gelu(xs)) >= 0)


class TestGradCheck:
    def test_sum_of_squares(self):
        err = grad_check(lambda t: (t * t).sum(), np.array([[1.0, 2.0]]), 1e-5)
        assert err < 1e-8

    def test_step_range(self):
        with pytest.raises(ValueError):
            grad_check(lambda t: t.sum(), np.zeros(2), 1e-2)

    def test_non_finite_is_an_error(self):
        def f(t):
            return nx.log_softmax(t * 1e308 * 10).sum()

        with pytest.raises((FloatingPointError, ValueError)):
            with np.errstate(all="ignore"):
                grad_check(f, np.ones((1, 2)), 1e-5)

    def test_reports_wrong_gradient(self):
        def broken(t):
            # forward x^2, backward claims 3x
            return nx._node((t.value**2).sum(), (t,), lambda g: (3 * t.value * g,))

        assert grad_check(broken, np.array([1.0, 2.0])) > 0.4

    def test_two_class_ce_head(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 5))
        labels = np.eye(2)[rng.integers(0, 2, 4)]

        def f(w):
            return -(nx.log_softmax(Tensor(x) @ w) * labels).sum()

        assert grad_check(f, rng.normal(size=(5, 2)), 1e-5) < 1e-5


# every differentiable kernel: 20 random points, step 1e-5, tolerance 1e-4
def _kernels():
    rng = np.random.default_rng(11)
    w = rng.normal(size=(4, 3))
    g = rng.normal(size=4)
    b = rng.normal(size=4)
    c = rng.normal(size=(3, 4))
    weights = rng.normal(size=(3, 4))
    idx = np.array([[0, 2], [1, 1]])
    proj = rng.normal(size=(3, 3))
    return {
        "softmax": lambda t: (nx.softmax(t) * weights).sum(),
        "log_softmax": lambda t: (nx.log_softmax(t) * weights).sum(),
        "gelu": lambda t: (nx.gelu_t(t) * weights).sum(),
        "layer_norm_x": lambda t: (nx.layer_norm_t(t, Tensor(g), Tensor(b)) * weights).sum(),
        "layer_norm_gain": lambda t: (nx.layer_norm_t(Tensor(c), t[0], Tensor(b)) * weights).sum(),
        "matmul_left": lambda t: ((t @ Tensor(w)) * proj).sum(),
        "matmul_right": lambda t: ((Tensor(w.T) @ t.transpose()) * (Tensor(w.T) @ t.transpose())).sum(),
        "add_broadcast": lambda t: ((t + Tensor(g)) * (t[0] + 1.0)).sum(),
        "mul": lambda t: (t * t * Tensor(weights)).sum(),
        "reshape_transpose": lambda t: (t.reshape(2, 6).transpose() * weights.reshape(6, 2)).sum(),
        "getitem": lambda t: (t[:, 1:] * t[:, :3]).sum(),
        "take_rows": lambda t: (nx.take_rows(t, idx) * nx.take_rows(t, idx)).sum(),
        "concat": lambda t: (nx.concat([t, t * t], axis=0) * np.vstack([weights, weights])).sum(),
        "sum_axis": lambda t: (t.sum(axis=1) * t.sum(axis=1)).sum(),
    }


@pytest.mark.parametrize("name", sorted(_kernels()))
def test_kernel_gradients(name):
    f = _kernels()[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = max(grad_check(f, rng.normal(size=(3, 4)), 1e-5) for _ in range(20))
    assert worst < 1e-4, f"{name}: {worst}"


def test_kernels_are_deterministic():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(7, 9))
    for fn in (nx.softmax_rows, nx.gelu, lambda m: nx.layer_norm(m, np.ones(9), np.zeros(9))):
        assert fn(x).tobytes() == fn(x.copy()).tobytes()


def test_backward_accumulates_shared_subexpressions():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    y = x * x
    z = (y + y * x).sum()
    z.backward()
    np.testing.assert_allclose(x.grad, 2 * x.value + 3 * x.value**2)
