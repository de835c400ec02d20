import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from attnmix import tensor as T
from attnmix.errors import DimensionError, InputError, NumericError
from attnmix.tensor import Tensor

from helpers import central_diff, grad_mismatch


def naive_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        x = [[1.0, 2.0], [3.0, 4.0]]
        assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(x)).data, np.array(x))

    def test_annihilator(self):
        out = T.matmul(Tensor(np.eye(2)), Tensor(np.zeros((2, 2))))
        assert np.array_equal(out.data, np.zeros((2, 2)))

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b),
                                   rtol=0, atol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_backward(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        g = rng.normal(size=(3, 2))
        loss = lambda: T.frob_sq(T.mul(T.matmul(a, b), Tensor(g)))
        T.backward(loss())
        for t in (a, b):
            assert grad_mismatch(t.grad, central_diff(loss, t)).size == 0


class TestEwise:
    def test_mul(self):
        assert np.array_equal(T.mul(Tensor([2.0, 3.0]), Tensor([0.0, 1.0])).data, [0.0, 3.0])

    def test_add_zero_identity(self):
        x = np.array([1.5, -2.0, 7.0])
        assert np.array_equal(T.add(Tensor(x), Tensor(np.zeros(3))).data, x)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.ones(2)), Tensor(np.ones(3)))

    def test_unknown_kind(self):
        with pytest.raises(InputError):
            T.ewise(Tensor([1.0]), Tensor([1.0]), "div")

    @pytest.mark.parametrize("kind", ["add", "sub", "mul"])
    def test_gradients_match_central_differences(self, kind):
        rng = np.random.default_rng(1)
        a = Tensor(rng.uniform(-2, 2, size=(3, 2)), requires_grad=True)
        b = Tensor(rng.uniform(-2, 2, size=(3, 2)), requires_grad=True)
        loss = lambda: T.frob_sq(T.ewise(a, b, kind))
        T.backward(loss())
        for t in (a, b):
            num = central_diff(loss, t)
            np.testing.assert_allclose(t.grad, num, rtol=1e-6, atol=1e-9)

    def test_mul_backward_formula(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([3.0, -4.0])
        out = T.mul(a, b)
        T.backward(T.frob_sq(out))
        # d/da sum((a*b)^2) = 2*a*b*b
        np.testing.assert_array_equal(a.grad, 2 * out.data * b.data)


class TestActivation:
    def test_relu(self):
        assert np.array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_relu_subgradient_at_zero(self):
        x = Tensor([0.0, 1.0, -1.0], requires_grad=True)
        T.backward(T.frob_sq(T.add(T.relu(x), Tensor([1.0, 1.0, 1.0]))))
        # upstream grad is 2*(relu(x)+1); mask is (x > 0)
        assert np.array_equal(x.grad, [0.0, 4.0, 0.0])

    def test_tanh_zero(self):
        assert T.tanh(Tensor([0.0])).data[0] == 0.0

    def test_tanh_gradient_closed_form(self):
        x = Tensor(np.linspace(-2, 2, 9), requires_grad=True)
        ones = Tensor(np.ones(9))
        y = T.tanh(x)
        T.backward(T.scale(T.frob_sq(T.add(y, ones)), 0.5))
        upstream = y.data + 1.0
        np.testing.assert_allclose(x.grad, upstream * (1 - np.tanh(x.data) ** 2), rtol=0, atol=1e-12)

    def test_unknown(self):
        with pytest.raises(InputError):
            T.activation(Tensor([1.0]), "gelu")


class TestLosses:
    def test_ce_uniform(self):
        loss = T.loss_ce(Tensor(np.zeros((3, 4))), [0, 1, 3])
        assert math.isclose(loss.item(), math.log(4), abs_tol=1e-12)

    def test_ce_saturated(self):
        logits = np.zeros((2, 3))
        logits[0, 1] = logits[1, 2] = 1000.0
        assert T.loss_ce(Tensor(logits), [1, 2]).item() == pytest.approx(0.0, abs=1e-12)

    def test_ce_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(5)
        z = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        labels = np.array([0, 2, 1, 2])
        T.backward(T.loss_ce(z, labels))
        p = np.exp(z.data - z.data.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(4), labels] -= 1
        np.testing.assert_allclose(z.grad, p / 4, rtol=0, atol=1e-10)

    @pytest.mark.parametrize("labels", [[0, 3], [-1, 0]])
    def test_ce_label_range(self, labels):
        with pytest.raises(InputError):
            T.loss_ce(Tensor(np.zeros((2, 3))), labels)

    def test_mse_values(self):
        assert T.loss_mse(Tensor([1.0, 2.0]), [1.0, 2.0]).item() == 0.0
        assert T.loss_mse(Tensor([2.0]), [0.0]).item() == 4.0

    def test_mse_gradient(self):
        rng = np.random.default_rng(2)
        pred = Tensor(rng.normal(size=5), requires_grad=True)
        target = rng.normal(size=5)
        loss = lambda: T.loss_mse(pred, target)
        T.backward(loss())
        np.testing.assert_allclose(pred.grad, 2 * (pred.data - target) / 5, rtol=0, atol=1e-15)
        np.testing.assert_allclose(pred.grad, central_diff(loss, pred), rtol=1e-6, atol=1e-10)

    def test_mse_length_mismatch(self):
        with pytest.raises(InputError):
            T.loss_mse(Tensor([1.0, 2.0]), [1.0])

    def test_frob_sq(self):
        assert T.frob_sq(Tensor(np.zeros((2, 2)))).item() == 0.0
        x = Tensor([[3.0, 4.0]], requires_grad=True)
        loss = T.frob_sq(x)
        assert loss.item() == 25.0
        T.backward(loss)
        assert np.array_equal(x.grad, 2 * x.data)


class TestBackward:
    def test_constant_wrt_leaf(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        other = Tensor([3.0], requires_grad=True)
        loss = T.add(T.frob_sq(other), T.scale(T.frob_sq(w), 0.0))
        T.backward(loss)
        assert np.array_equal(w.grad, [0.0, 0.0])

    def test_accumulates_until_zeroed(self):
        w = Tensor([1.0, -2.0], requires_grad=True)
        T.backward(T.frob_sq(w))
        T.backward(T.frob_sq(w))
        assert np.array_equal(w.grad, 4 * w.data)
        T.zero_grad([w])
        T.backward(T.frob_sq(w))
        assert np.array_equal(w.grad, 2 * w.data)

    def test_non_scalar_root(self):
        with pytest.raises(InputError):
            T.backward(T.add(Tensor([1.0, 2.0], requires_grad=True), Tensor([1.0, 1.0])))

    def test_shared_subexpression(self):
        x = Tensor([1.5], requires_grad=True)
        y = T.mul(x, x)
        T.backward(T.frob_sq(T.add(y, y)))  # (2x^2)^2 = 4x^4 -> 16x^3
        assert x.grad[0] == pytest.approx(16 * 1.5 ** 3, rel=1e-15)

    def test_linearity(self):
        rng = np.random.default_rng(9)
        w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        x = Tensor(rng.normal(size=(4, 3)))
        l1 = lambda: T.loss_ce(T.matmul(x, w), [0, 1, 1, 0])
        l2 = lambda: T.frob_sq(w)
        T.backward(l1())
        T.backward(l2())
        separate = w.grad.copy()
        w.grad = None
        T.backward(T.add(l1(), l2()))
        np.testing.assert_allclose(w.grad, separate, rtol=1e-14, atol=1e-15)

    def test_fresh_graph_per_forward(self):
        w = Tensor([2.0], requires_grad=True)
        a = T.frob_sq(w)
        w.data = np.array([3.0])
        b = T.frob_sq(w)
        T.backward(a)
        assert w.grad[0] == 4.0  # graph a saw w = 2
        w.grad = None
        T.backward(b)
        assert w.grad[0] == 6.0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_forward_rejected(self):
        with pytest.raises(NumericError):
            T.scale(Tensor([1e308]), 10.0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 3), elements=st.floats(-2, 2)),
       arrays(np.float64, (3, 2), elements=st.floats(-2, 2)))
def test_forward_is_deterministic(a, b):
    out1 = T.tanh(T.matmul(Tensor(a), Tensor(b))).data
    out2 = T.tanh(T.matmul(Tensor(a), Tensor(b))).data
    assert out1.tobytes() == out2.tobytes()


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-2, 2)),
       arrays(np.float64, (3, 2), elements=st.floats(-2, 2)),
       st.sampled_from(["relu", "tanh"]))
def test_composite_gradient_property(a0, b0, act):
    a = Tensor(a0, requires_grad=True)
    b = Tensor(b0, requires_grad=True)
    loss = lambda: T.loss_ce(T.activation(T.matmul(a, b), act), [0, 1])
    if act == "relu" and np.min(np.abs(a0 @ b0)) < 1e-4:
        return  # finite differences straddle the kink
    T.backward(loss())
    for t in (a, b):
        assert grad_mismatch(t.grad, central_diff(loss, t)).size == 0
