import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anpvs.errors import ContractError, DimensionError, DomainError, GraphStateError
from anpvs.tensor import (
    EULER_GAMMA,
    Tensor,
    conv2d_forward,
    dense_forward,
    digamma,
    grad_check,
    maxpool2d,
    softmax_cross_entropy,
    trigamma,
)


def const(x):
    return Tensor.constant(np.asarray(x, dtype=np.float64))


class TestTensorBasics:
    def test_grad_buffer_matches_values(self):
        t = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        assert t.grad.shape == t.values.shape
        assert t.values.dtype == np.float64
        assert np.all(t.grad == 0.0)

    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_square_at_three(self):
        x = Tensor(3.0, requires_grad=True)
        (x * x).backward()
        assert x.grad == 6.0

    def test_pow(self):
        x = Tensor(3.0, requires_grad=True)
        (x ** 2).backward()
        assert x.grad == 6.0

    def test_double_backward_is_state_error(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = (x * 2.0).sum()
        loss.backward()
        with pytest.raises(GraphStateError):
            loss.backward()

    def test_consumed_node_cannot_be_reused(self):
        x = Tensor(np.ones(3), requires_grad=True)
        h = x * 2.0
        h.sum().backward()
        with pytest.raises(GraphStateError):
            h + 1.0

    def test_non_scalar_backward_is_contract_error(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_leaf_gradients_accumulate(self):
        x = Tensor(np.ones(2), requires_grad=True)
        (x * 3.0).sum().backward()
        (x * 3.0).sum().backward()
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])

    def test_relu_kink_gradient_is_zero(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
        x.relu().sum().backward()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_broadcast_gradient_reduces(self):
        x = Tensor(np.ones((4, 3)), requires_grad=True)
        b = Tensor(np.zeros(3), requires_grad=True)
        (x + b).sum().backward()
        np.testing.assert_array_equal(b.grad, [4.0, 4.0, 4.0])

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(1)
        x, w, b = rng.normal(size=(2, 1, 6, 6)), rng.normal(size=(3, 1, 3, 3)), rng.normal(size=3)
        out1 = conv2d_forward(const(x), const(w), const(b)).values
        out2 = conv2d_forward(const(x), const(w), const(b)).values
        np.testing.assert_array_equal(out1, out2)


class TestDense:
    def test_hand_multiply(self):
        out = dense_forward(const([[1, 0]]), const([[2, 3], [4, 5]]), const([0, 0]))
        np.testing.assert_array_equal(out.values, [[2, 3]])

    def test_identity(self):
        out = dense_forward(const(np.eye(2)), const(np.eye(2)), const(np.zeros(2)))
        np.testing.assert_array_equal(out.values, np.eye(2))

    def test_bias_only(self):
        out = dense_forward(const([[0, 0]]), const(np.zeros((2, 2))), const([1, 1]))
        np.testing.assert_array_equal(out.values, [[1, 1]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            dense_forward(const(np.ones((1, 3))), const(np.ones((2, 2))), const(np.zeros(2)))


class TestConv:
    def test_ones_sum_to_nine(self):
        out = conv2d_forward(const(np.ones((1, 1, 3, 3))), const(np.ones((1, 1, 3, 3))), const([0.0]))
        assert out.shape == (1, 1, 1, 1)
        assert out.values.item() == 9.0

    def test_delta_kernel_is_identity(self):
        x = np.random.default_rng(2).normal(size=(2, 3, 5, 5))
        kernel = np.zeros((3, 3, 3, 3))
        for c in range(3):
            kernel[c, c, 1, 1] = 1.0
        out = conv2d_forward(const(x), const(kernel), const(np.zeros(3)), padding=1)
        np.testing.assert_allclose(out.values, x, atol=1e-12)

    def test_zero_kernel_gives_bias(self):
        out = conv2d_forward(const(np.ones((1, 2, 4, 4))), const(np.zeros((3, 2, 3, 3))), const([1.5, -2.0, 0.0]))
        np.testing.assert_array_equal(out.values[0, 0], np.full((2, 2), 1.5))
        np.testing.assert_array_equal(out.values[0, 1], np.full((2, 2), -2.0))

    def test_output_size_formula(self):
        out = conv2d_forward(const(np.ones((1, 1, 7, 9))), const(np.ones((2, 1, 3, 3))), const([0.0, 0.0]),
                             stride=2, padding=1)
        assert out.shape == (1, 2, (7 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError):
            conv2d_forward(const(np.ones((1, 1, 2, 2))), const(np.ones((1, 1, 3, 3))), const([0.0]))

    def test_matches_direct_loops(self):
        rng = np.random.default_rng(3)
        x, w, b = rng.normal(size=(2, 2, 6, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        out = conv2d_forward(const(x), const(w), const(b), stride=2, padding=1).values
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(out)
        for n in range(2):
            for o in range(3):
                for i in range(out.shape[2]):
                    for j in range(out.shape[3]):
                        ref[n, o, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]) + b[o]
        np.testing.assert_allclose(out, ref, atol=1e-12)


class TestMaxPool:
    def test_max(self):
        assert maxpool2d(const([[[[1, 2], [3, 4]]]]), 2).values.item() == 4.0

    def test_constant(self):
        out = maxpool2d(const(np.full((1, 2, 4, 4), 7.0)), 2)
        np.testing.assert_array_equal(out.values, np.full((1, 2, 2, 2), 7.0))

    def test_tie_routes_to_first(self):
        x = Tensor(np.array([[[[1.0, 2.0], [2.0, 1.0]]]]), requires_grad=True)
        out = maxpool2d(x, 2)
        assert out.values.item() == 2.0
        out.sum().backward()
        np.testing.assert_array_equal(x.grad[0, 0], [[0.0, 1.0], [0.0, 0.0]])

    def test_window_too_large(self):
        with pytest.raises(DimensionError):
            maxpool2d(const(np.ones((1, 1, 2, 2))), 3)


class TestCrossEntropy:
    @pytest.mark.parametrize("classes", [2, 3, 10])
    def test_uniform_is_log_c(self, classes):
        loss = softmax_cross_entropy(const(np.zeros((1, classes))), [classes - 1])
        assert loss.item() == math.log(classes)

    def test_confident_logits(self):
        loss = softmax_cross_entropy(const([[10.0, -10.0]]), [0])
        assert loss.item() == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-9)
        assert loss.item() == pytest.approx(2.06e-9, rel=1e-2)

    def test_batch_mean_invariance(self):
        row = [[0.3, -1.2, 2.0]]
        single = softmax_cross_entropy(const(row), [1]).item()
        double = softmax_cross_entropy(const(row * 2), [1, 1]).item()
        assert single == pytest.approx(double, abs=1e-15)

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            softmax_cross_entropy(const(np.zeros((1, 3))), [3])

    def test_non_negative(self):
        logits = np.random.default_rng(4).normal(scale=5, size=(50, 7))
        per = softmax_cross_entropy(const(logits), np.arange(50) % 7, reduction="none").values
        assert np.all(per >= 0)


class TestDigamma:
    def test_one(self):
        assert digamma(1.0) == pytest.approx(-EULER_GAMMA, abs=1e-10)

    def test_two(self):
        assert digamma(2.0) == pytest.approx(1.0 - EULER_GAMMA, abs=1e-10)

    def test_half(self):
        assert digamma(0.5) == pytest.approx(-EULER_GAMMA - 2 * math.log(2.0), abs=1e-10)

    def test_against_scipy(self):
        from scipy.special import polygamma, psi

        x = np.geomspace(1e-3, 1e3, 200)
        np.testing.assert_allclose(digamma(x), psi(x), atol=1e-10, rtol=1e-12)
        np.testing.assert_allclose(trigamma(x), polygamma(1, x), rtol=1e-9)

    @pytest.mark.parametrize("bad", [0.0, -1.0])
    def test_domain(self, bad):
        with pytest.raises(DomainError):
            digamma(bad)

    def test_on_graph_gradient_is_trigamma(self):
        err = grad_check(lambda t: digamma(t).sum(), np.array([0.3, 1.7, 8.0]))
        assert err < 1e-6


class TestGradCheck:
    def test_quadratic_form(self):
        a = np.array([[2.0, 0.5], [0.5, 1.0]])

        def f(x):
            return (x * dense_forward(x.reshape(1, 2), Tensor.constant(a), Tensor.constant(np.zeros(2)))
                    .reshape(2)).sum()

        assert grad_check(f, np.array([0.7, -1.3])) < 1e-7

    def test_constant_function(self):
        def f(x):
            return (x * 0.0).sum() + 4.0

        assert grad_check(f, np.array([1.0, 2.0])) == 0.0

    def test_two_layer_dense(self):
        rng = np.random.default_rng(5)
        w1, w2 = rng.normal(size=(4, 6)), rng.normal(size=(6, 3))
        b1, b2 = rng.normal(size=6), rng.normal(size=3)
        labels = [0, 2, 1]

        def f(x):
            h = dense_forward(x, Tensor.constant(w1), Tensor.constant(b1)).relu()
            return softmax_cross_entropy(dense_forward(h, Tensor.constant(w2), Tensor.constant(b2)), labels)

        assert grad_check(f, rng.normal(size=(3, 4))) < 1e-4


_unary = {
    "exp": lambda t: t.exp(),
    "log": lambda t: (t * t + 1.0).log(),
    "sigmoid": lambda t: t.sigmoid(),
    "softplus": lambda t: t.softplus(),
    "abs": lambda t: t.abs(),
    "div": lambda t: 1.0 / (t * t + 0.5),
    "mean": lambda t: t.mean(axis=0, keepdims=True) * t,
    "clip": lambda t: t.clip(-0.5, 0.5),
}


@settings(max_examples=40, deadline=None)
@given(op=st.sampled_from(sorted(_unary)), rows=st.integers(1, 4), cols=st.integers(1, 4), seed=st.integers(0, 10_000))
def test_elementwise_ops_match_finite_differences(op, rows, cols, seed):
    x = np.random.default_rng(seed).normal(size=(rows, cols))
    # keep away from the kinks of abs and clip
    x = np.where(np.abs(x) < 0.05, 0.2, x)
    x = np.where(np.abs(np.abs(x) - 0.5) < 0.05, 0.8 * np.sign(x), x)
    weights = np.random.default_rng(seed + 1).normal(size=(rows, cols))
    assert grad_check(lambda t: (_unary[op](t) * weights).sum(), x) < 1e-4


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), stride=st.integers(1, 2), padding=st.integers(0, 1))
def test_conv_and_pool_gradients(seed, stride, padding):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 2, 6, 6))
    w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    b = rng.normal(size=3)
    weights = None

    def f(t):
        nonlocal weights
        out = maxpool2d(conv2d_forward(t, w, Tensor.constant(b), stride, padding), 2)
        if weights is None:
            weights = np.random.default_rng(seed + 2).normal(size=out.shape)
        return (out * weights).sum()

    assert grad_check(f, x) < 1e-4
    assert grad_check(lambda k: (conv2d_forward(Tensor.constant(x), k, Tensor.constant(b), stride, padding)
                                 * 1.0).sum(), w.values) < 1e-4
