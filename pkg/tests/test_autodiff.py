import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sememelm import autodiff as ad
from sememelm.autodiff import AutodiffError, NonFiniteError, ShapeError, Tensor


def param(shape, seed=0, scale=1.0):
    return ad.parameter(np.random.default_rng(seed).normal(0.0, scale, shape))


def numeric_grad(f, x, eps=1e-6):
    """Central differences of a numpy function f(x) -> float."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + eps
        fp = f(x)
        x[i] = old - eps
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


class TestTensor:
    def test_nan_input_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])

    def test_inf_result_rejected(self):
        with pytest.raises(NonFiniteError):
            ad.exp(Tensor([1000.0]))

    def test_log_non_positive(self):
        with pytest.raises(NonFiniteError):
            ad.log(Tensor([0.0]))

    def test_item_requires_single_value(self):
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0]).item()

    def test_float64(self):
        assert Tensor([1, 2]).value.dtype == np.float64


class TestShapes:
    def test_matmul_mismatch(self):
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_no_implicit_broadcast(self):
        with pytest.raises(ShapeError):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((1, 3))))

    def test_bias_shape(self):
        with pytest.raises(ShapeError):
            ad.add_bias(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))

    def test_softmax_row_without_support(self):
        with pytest.raises(AutodiffError):
            ad.masked_softmax_rows(Tensor(np.zeros((2, 2))), np.array([[1, 0], [0, 0]]))


class TestForward:
    def test_masked_softmax(self):
        x = np.array([[1.0, 2.0, 3.0], [0.5, -1.0, 4.0]])
        mask = np.array([[1, 1, 0], [1, 1, 1]], dtype=bool)
        y = ad.masked_softmax_rows(Tensor(x), mask).value
        e = np.exp([1.0, 2.0])
        np.testing.assert_allclose(y[0], [e[0] / e.sum(), e[1] / e.sum(), 0.0])
        assert y[0, 2] == 0.0
        np.testing.assert_allclose(y.sum(axis=1), 1.0)

    def test_logsumexp_is_stable(self):
        y = ad.logsumexp_rows(Tensor([[1000.0, 1000.0]])).value
        np.testing.assert_allclose(y, [1000.0 + np.log(2.0)])

    def test_leaky_relu(self):
        y = ad.leaky_relu(Tensor([-2.0, 0.0, 3.0]), 0.2).value
        np.testing.assert_allclose(y, [-0.4, 0.0, 3.0])

    def test_mean_rows(self):
        y = ad.mean_rows(Tensor([[1.0, 2.0], [3.0, 6.0]])).value
        np.testing.assert_array_equal(y, [[2.0, 4.0]])

    def test_normalize_zero_row(self):
        y = ad.normalize_rows(Tensor([[3.0, 4.0], [0.0, 0.0]])).value
        np.testing.assert_allclose(y, [[0.6, 0.8], [0.0, 0.0]])


finite = st.floats(-3, 3, allow_nan=False)


class TestGradients:
    """Backward against finite differences of independent numpy formulas."""

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite))
    def test_matmul(self, a, b):
        A, B = ad.parameter(a.copy()), ad.parameter(b.copy())
        ad.backward(ad.sum_all(ad.matmul(A, B)))
        np.testing.assert_allclose(A.grad, numeric_grad(lambda x: (x @ b).sum(), a.copy()), atol=1e-6)
        np.testing.assert_allclose(B.grad, numeric_grad(lambda x: (a @ x).sum(), b.copy()), atol=1e-6)

    def test_softmax(self):
        x = np.random.default_rng(1).normal(size=(3, 4))
        w = np.random.default_rng(2).normal(size=(3, 4))
        mask = np.array([[1, 1, 0, 1], [0, 1, 0, 0], [1, 1, 1, 1]], dtype=bool)

        def ref(v):
            z = np.where(mask, v, -np.inf)
            e = np.exp(z - z.max(axis=1, keepdims=True))
            return float((w * e / e.sum(axis=1, keepdims=True)).sum())

        X = ad.parameter(x.copy())
        ad.backward(ad.sum_all(ad.mul(ad.masked_softmax_rows(X, mask), Tensor(w))))
        np.testing.assert_allclose(X.grad, numeric_grad(ref, x.copy()), atol=1e-7)

    def test_l2_norm_and_normalize(self):
        x = np.random.default_rng(3).normal(size=(3, 5))
        w = np.random.default_rng(4).normal(size=(3, 5))
        X = ad.parameter(x.copy())
        ad.backward(ad.dot(ad.normalize_rows(X), Tensor(w)))
        ref = lambda v: float((w * v / np.linalg.norm(v, axis=1, keepdims=True)).sum())
        np.testing.assert_allclose(X.grad, numeric_grad(ref, x.copy()), atol=1e-7)

        X = ad.parameter(x.copy())
        ad.backward(ad.sum_all(ad.l2_norm_rows(X)))
        np.testing.assert_allclose(X.grad, x / np.linalg.norm(x, axis=1, keepdims=True), atol=1e-12)

    def test_norm_subgradient_at_origin(self):
        X = ad.parameter(np.zeros((1, 3)))
        ad.backward(ad.sum_all(ad.l2_norm_rows(X)))
        np.testing.assert_array_equal(X.grad, 0.0)

    def test_select_rows_routes_to_selected_only(self):
        X = param((4, 3))
        ad.backward(ad.sum_all(ad.select_rows(X, [2, 0, 2])))
        np.testing.assert_array_equal(X.grad, [[1] * 3, [0] * 3, [2] * 3, [0] * 3])

    def test_gather(self):
        X = param((3, 3))
        ad.backward(ad.sum_all(ad.gather(X, [0, 1, 1], [2, 0, 0])))
        expected = np.zeros((3, 3))
        expected[0, 2] = 1
        expected[1, 0] = 2
        np.testing.assert_array_equal(X.grad, expected)

    def test_fan_out_accumulates(self):
        x = ad.parameter([[2.0]])
        ad.backward(ad.sum_all(ad.mul(x, x)))
        np.testing.assert_allclose(x.grad, [[4.0]])

    def test_leaky_relu_slope(self):
        x = ad.parameter([-1.0, 2.0])
        ad.backward(ad.sum_all(ad.leaky_relu(x, 0.2)))
        np.testing.assert_allclose(x.grad, [0.2, 1.0])

    @pytest.mark.parametrize("build", [
        lambda a, b: ad.sum_all(ad.tanh(ad.add(a, b))),
        lambda a, b: ad.sum_all(ad.exp(ad.scale(ad.sub(a, b), 0.3))),
        lambda a, b: ad.sum_all(ad.logaddexp(a, b)),
        lambda a, b: ad.squared_error_mean(a, b),
        lambda a, b: ad.sum_all(ad.logsumexp_rows(ad.concat_rows([a, b]))),
        lambda a, b: ad.dot(ad.mean_rows(a), ad.mean_rows(ad.transpose(ad.transpose(b)))),
        lambda a, b: ad.sum_all(ad.log(ad.add(ad.mul(a, a), ad.exp(b)))),
    ])
    def test_grad_check_composites(self, build):
        a, b = param((3, 2), 5), param((3, 2), 6)
        assert ad.grad_check(lambda: build(a, b), {"a": a, "b": b}) < 1e-7

    def test_bias(self):
        a, b = param((3, 2), 1), param((2,), 2)
        assert ad.grad_check(lambda: ad.sum_all(ad.tanh(ad.add_bias(a, b))), [a, b]) < 1e-7


class TestBackwardRules:
    def test_second_backward_on_same_root(self):
        x = ad.parameter([1.0])
        loss = ad.sum_all(ad.mul(x, x))
        ad.backward(loss)
        with pytest.raises(AutodiffError):
            ad.backward(loss)

    def test_non_scalar_root(self):
        with pytest.raises(ShapeError):
            ad.backward(ad.scale(param((2, 2)), 2.0))

    def test_leaf_root(self):
        x = ad.parameter(3.0)
        ad.backward(x)
        assert x.grad == 1.0

    def test_grads_accumulate_across_calls(self):
        x = ad.parameter([1.0, 2.0])
        ad.backward(ad.sum_all(x))
        ad.backward(ad.sum_all(ad.scale(x, 3.0)))
        np.testing.assert_array_equal(x.grad, [4.0, 4.0])
        ad.zero_grad([x])
        assert x.grad is None

    def test_constants_get_no_grad(self):
        c = Tensor([1.0, 2.0])
        x = ad.parameter([3.0, 4.0])
        ad.backward(ad.dot(c, x))
        assert c.grad is None

    def test_cycle_detected(self):
        x = ad.parameter([1.0])
        a = ad.scale(x, 2.0)
        b = ad.scale(a, 2.0)
        a._parents = (b,)  # corrupt the tape on purpose
        with pytest.raises(AutodiffError, match="cycle"):
            ad.backward(ad.sum_all(b))

    def test_no_grad_records_nothing(self):
        x = ad.parameter([1.0])
        with ad.no_grad():
            y = ad.scale(x, 2.0)
        assert not y.requires_grad and y.is_leaf

    def test_detach_blocks_gradient(self):
        x = ad.parameter([1.0, 2.0])
        ad.backward(ad.dot(ad.detach(x), x))
        np.testing.assert_array_equal(x.grad, [1.0, 2.0])


class TestGradCheck:
    def test_linear(self):
        w = param((4,), 1)
        c = Tensor(np.arange(4.0))
        assert ad.grad_check(lambda: ad.dot(w, c), [w]) < 1e-9

    def test_quadratic(self):
        w = param((3, 3), 2)
        assert ad.grad_check(lambda: ad.sum_all(ad.mul(w, w)), [w]) < 1e-8

    def test_detects_wrong_gradient(self):
        w = param((3,), 3)

        def bad_square(a):
            def backward(g):
                ad._accum(a, g * a.value)  # should be 2 * a
            return ad._result(a.value ** 2, (a,), backward, "bad")

        assert ad.grad_check(lambda: ad.sum_all(bad_square(w)), [w]) > 1e-2

    def test_per_parameter_names(self):
        a, b = param((2,), 1), param((2,), 2)
        errors = ad.gradient_errors(lambda: ad.dot(a, b), {"a": a, "b": b})
        assert set(errors) == {"a", "b"}

    def test_eps_must_be_positive(self):
        w = param((2,))
        with pytest.raises(ValueError):
            ad.grad_check(lambda: ad.sum_all(w), [w], eps=0.0)

    def test_non_finite_perturbation_is_reported(self):
        w = ad.parameter([700.0])
        with pytest.raises(NonFiniteError):
            ad.grad_check(lambda: ad.sum_all(ad.exp(w)), [w], eps=20.0)
        # per-primitive checks are back on afterwards
        with pytest.raises(NonFiniteError):
            ad.exp(Tensor([1000.0]))

    def test_leaves_grads_clear_and_values_intact(self):
        w = param((3,), 4)
        before = w.value.copy()
        ad.grad_check(lambda: ad.sum_all(ad.tanh(w)), [w])
        np.testing.assert_array_equal(w.value, before)
        assert w.grad is None
