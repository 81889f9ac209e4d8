import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stir import autodiff as ad
from stir.autodiff import Tensor, backward, finite_diff_grad


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(b)))


def check_grad(f, *shapes, seed=0, eps=1e-3, tol=1e-4, low=-1.0, high=1.0):
    """Compare tape gradients of scalar f(*tensors) with central differences, per input."""
    rng = np.random.default_rng(seed)
    arrays = [rng.uniform(low, high, s) for s in shapes]
    leaves = [t64(a) for a in arrays]
    backward(f(*leaves))
    for i, leaf in enumerate(leaves):

        def fi(x, i=i):
            args = [t64(a, False) for a in arrays]
            args[i] = x
            return f(*args)

        numeric = finite_diff_grad(fi, t64(arrays[i], False), eps)
        assert rel_err(leaf.grad, numeric) < tol, (i, leaf.grad, numeric)


class TestMatmul:
    def test_identity(self):
        b = np.arange(9.0).reshape(3, 3)
        np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(b)).data, b)

    def test_small_product(self):
        out = Tensor([[1, 2], [3, 4]]) @ Tensor([[1], [1]])
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_gradient_random_4x5_5x3(self):
        check_grad(lambda a, b: (a @ b).sum() + ((a @ b) ** 2).mean(), (4, 5), (5, 3))

    def test_batched_gradient(self):
        check_grad(lambda a, b: ((a @ b) ** 2).sum(), (2, 3, 4), (4, 2))


class TestSoftmax:
    def test_constant(self):
        np.testing.assert_allclose(ad.softmax(Tensor(np.full(4, 7.0))).data, [0.25] * 4)

    def test_closed_form(self):
        out = ad.softmax(Tensor(np.array([0.0, math.log(3)], dtype=np.float64)))
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)

    def test_large_inputs(self):
        np.testing.assert_allclose(ad.softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])

    def test_bad_axis(self):
        with pytest.raises(ad.ShapeError):
            ad.softmax(Tensor(np.ones((2, 2))), axis=2)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-100, 100))
    def test_distribution_and_shift_invariance(self, seed, shift):
        x = np.random.default_rng(seed).uniform(-50, 50, (3, 6))
        p = ad.softmax(Tensor(x, dtype=np.float64), axis=1).data
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        q = ad.softmax(Tensor(x + shift, dtype=np.float64), axis=1).data
        np.testing.assert_allclose(p, q, atol=1e-9)

    def test_gradient(self):
        w = np.random.default_rng(3).normal(size=(3, 5))
        check_grad(lambda x: (ad.softmax(x, axis=1) * Tensor(w, dtype=np.float64)).sum(), (3, 5))


class TestLayerNorm:
    def unit(self, d):
        return Tensor(np.ones(d)), Tensor(np.zeros(d))

    def test_constant_row(self):
        out = ad.layernorm(Tensor(np.full((1, 4), 3.0)), *self.unit(4))
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))

    def test_two_points(self):
        out = ad.layernorm(Tensor(np.array([[1.0, 3.0]], dtype=np.float64)), *self.unit(2))
        np.testing.assert_allclose(out.data, [[-1, 1]], atol=1e-5)

    def test_row_means(self):
        x = np.random.default_rng(0).normal(size=(3, 8))
        out = ad.layernorm(Tensor(x, dtype=np.float64), *self.unit(8))
        assert np.all(np.abs(out.data.mean(axis=1)) < 1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 100))
    def test_moments(self, seed, scale):
        x = np.random.default_rng(seed).normal(size=(4, 16)) * scale
        out = ad.layernorm(Tensor(x, dtype=np.float64), *self.unit(16)).data
        assert np.all(np.abs(out.mean(axis=1)) < 1e-5)
        # epsilon 1e-5 caps the normalised variance at var / (var + 1e-5)
        big = x.var(axis=1) > 1e-2
        np.testing.assert_allclose(out.var(axis=1)[big], 1.0, atol=1e-3)

    def test_gain_shape(self):
        with pytest.raises(ad.ShapeError):
            ad.layernorm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(3)))

    def test_gradient(self):
        w = np.random.default_rng(1).normal(size=(2, 3, 6))
        check_grad(lambda x, g, b: (ad.layernorm(x, g, b) * Tensor(w, dtype=np.float64)).sum(), (2, 3, 6), (6,), (6,))


class TestElementwise:
    def test_sigmoid_at_zero(self):
        x = t64([0.0])
        y = ad.sigmoid(x)
        backward(y.sum())
        assert y.data[0] == 0.5
        assert x.grad[0] == 0.25

    def test_relu(self):
        assert ad.relu(Tensor([-2.0])).data[0] == 0

    def test_concat_shape(self):
        out = ad.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 5)))], axis=1)
        assert out.shape == (2, 8)

    def test_concat_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 5)))], axis=1)

    def test_add_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))

    def test_no_overflow_in_range(self):
        x = Tensor(np.linspace(-1e4, 1e4, 101))
        for op in (ad.sigmoid, ad.relu, ad.gelu, lambda t: ad.softmax(t, 0)):
            assert np.all(np.isfinite(op(x).data))

    def test_non_finite_is_an_error(self):
        with pytest.raises(ad.NumericalError):
            ad.log(Tensor([0.0]))

    @pytest.mark.parametrize(
        "name, f, shapes",
        [
            ("add", lambda a, b: (a + b).sum(), [(3, 4), (4,)]),
            ("sub", lambda a, b: ((a - b) ** 2).sum(), [(3, 4), (3, 1)]),
            ("mul", lambda a, b: (a * b).sum(), [(2, 3), (2, 3)]),
            ("div", lambda a, b: (a / (b * b + 1)).sum(), [(2, 3), (3,)]),
            ("sigmoid", lambda a: (ad.sigmoid(a) ** 2).sum(), [(5,)]),
            ("gelu", lambda a: (ad.gelu(a) ** 2).sum(), [(5, 2)]),
            ("exp", lambda a: ad.exp(a).mean(), [(4,)]),
            ("mean_axis", lambda a: (a.mean(axis=1) ** 2).sum(), [(3, 4)]),
            ("sum_keepdims", lambda a: (a * a.sum(axis=0, keepdims=True)).sum(), [(3, 4)]),
            ("reshape_transpose", lambda a: (a.reshape(2, 6).transpose() @ a.reshape(2, 6)).sum(), [(3, 4)]),
            ("concat", lambda a, b: (ad.concat([a, b], 1) ** 2).sum(), [(2, 3), (2, 2)]),
            ("take", lambda a: (a[np.array([0, 2, 2]), np.array([1, 0, 0])] ** 2).sum(), [(3, 3)]),
            ("l2_normalize", lambda a: (ad.l2_normalize(a, 1) * ad.l2_normalize(a, 1)[::-1]).sum(), [(3, 4)]),
        ],
    )
    def test_gradients(self, name, f, shapes):
        check_grad(f, *shapes)

    def test_relu_gradient_away_from_kink(self):
        check_grad(lambda a: (ad.relu(a) ** 2).sum(), (6,), low=0.1, high=1.0)
        check_grad(lambda a: (ad.relu(-a) ** 2).sum(), (6,), low=0.1, high=1.0)

    def test_sqrt_gradient(self):
        check_grad(lambda a: ad.sqrt(a).sum(), (5,), low=0.5, high=2.0)

    def test_log_gradient(self):
        check_grad(lambda a: ad.log(a).sum(), (5,), low=0.5, high=2.0)

    def test_dropout(self):
        x = Tensor(np.ones((100, 100)))
        assert ad.dropout(x, 0.5, None, train=False) is x
        a = ad.dropout(x, 0.5, np.random.default_rng(0), train=True).data
        b = ad.dropout(x, 0.5, np.random.default_rng(0), train=True).data
        np.testing.assert_array_equal(a, b)
        assert set(np.unique(a)) == {0.0, 2.0}
        assert abs(a.mean() - 1) < 0.05


class TestBCE:
    def test_half(self):
        for y in (0, 1):
            assert ad.bce_loss(Tensor([0.5], dtype=np.float64), [y]).item() == pytest.approx(math.log(2))

    def test_near_perfect(self):
        assert ad.bce_loss(Tensor([1 - 1e-7], dtype=np.float64), [1]).item() == pytest.approx(1e-7, rel=1e-3)

    def test_batch(self):
        out = ad.bce_loss(Tensor([0.9, 0.1], dtype=np.float64), [1, 0]).item()
        assert out == pytest.approx(-math.log(0.9), abs=1e-9)
        assert out == pytest.approx(0.10536, abs=1e-5)

    def test_clamped_at_extremes(self):
        assert np.isfinite(ad.bce_loss(Tensor([0.0, 1.0], dtype=np.float64), [1, 0]).item())

    def test_bad_label(self):
        with pytest.raises(ValueError):
            ad.bce_loss(Tensor([0.5]), [2])

    def test_gradient(self):
        y = np.array([1, 0, 1, 0])
        check_grad(lambda p: ad.bce_loss(p, y), (4,), low=0.05, high=0.95)


class TestBackward:
    def test_sum_gives_ones(self):
        x = t64(np.random.default_rng(0).normal(size=(2, 3, 4)))
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_mean_square(self):
        x = t64([1.0, 2.0, 3.0])
        backward((x * x).mean())
        np.testing.assert_allclose(x.grad, [2 / 3, 4 / 3, 2])

    def test_non_scalar(self):
        x = t64([1.0, 2.0])
        with pytest.raises(ad.GraphError):
            backward(x * 2)

    def test_reuse_is_an_error(self):
        x = t64([1.0, 2.0])
        loss = (x * x).sum()
        backward(loss)
        with pytest.raises(ad.GraphError):
            backward(loss)

    def test_shared_subexpression_accumulates(self):
        x = t64([3.0])
        y = x * x
        backward((y + y).sum())
        np.testing.assert_allclose(x.grad, [12.0])

    def test_leaf_without_grad_untouched(self):
        x = t64([1.0])
        c = t64([2.0], grad=False)
        backward((x * c).sum())
        assert c.grad is None


class TestFiniteDiff:
    def test_sum(self):
        g = finite_diff_grad(lambda t: t.sum(), t64(np.random.default_rng(0).normal(size=(3, 2)), False))
        np.testing.assert_allclose(g, np.ones((3, 2)), atol=1e-9)

    def test_square(self):
        g = finite_diff_grad(lambda t: (t * t).sum(), t64([3.0], False), 1e-3)
        assert abs(g[0] - 6.0) < 1e-5

    def test_agrees_with_backward_on_mlp(self):
        rng = np.random.default_rng(7)
        w1, w2 = rng.normal(size=(4, 8)), rng.normal(size=(8, 1))
        x = rng.normal(size=(5, 4))

        def mlp(a):
            return (ad.gelu(a @ t64(w1, False)) @ t64(w2, False)).mean()

        leaf = t64(x)
        backward(mlp(leaf))
        assert rel_err(leaf.grad, finite_diff_grad(mlp, t64(x, False))) < 1e-4

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda t: t.sum(), t64([1.0]), 0.0)


def test_randomized_gradient_trials():
    """100 randomized trials over a composite of every differentiable op."""

    def f(a, b, g, bias):
        h = ad.layernorm(a @ b, g, bias)
        s = ad.softmax(h, axis=-1)
        z = ad.concat([ad.gelu(h), ad.sigmoid(h) * s], axis=1)
        return (z * z).mean() + ad.relu(h + 3.0).sum() * 0.01

    for seed in range(100):
        check_grad(f, (3, 4), (4, 5), (5,), (5,), seed=seed, eps=1e-5)
