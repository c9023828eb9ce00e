"""Tensor op and autodiff tests, anchored on central finite differences."""

import numpy as np
import pytest

from earvit.errors import ConfigError, ShapeError
from earvit.tensor import (Tensor, concat, finite_diff_check, gelu,
                           l2_normalize, layer_norm, logsumexp, no_grad,
                           softmax, trunc_normal)


class TestMatmul:
    def test_identity_is_exact_both_sides(self):
        rng = np.random.default_rng(0)
        # eighths are exactly representable, so 1*x + 0*y sums stay bit-exact
        a = Tensor(rng.integers(-40, 40, size=(5, 5)) / 8.0)
        eye = Tensor(np.eye(5))
        assert np.array_equal((eye @ a).data, a.data)
        assert np.array_equal((a @ eye).data, a.data)

    def test_hand_product(self):
        out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
        assert out.data.tolist() == [[11.0]]

    def test_identity_times_known_matrix(self):
        m = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal((Tensor(np.eye(2)) @ m).data, m.data)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        err = finite_diff_check(lambda: (a @ b).sum(), [a, b])
        assert err < 1e-6

    def test_batched_times_weight_gradient(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        err = finite_diff_check(lambda: ((a @ w) ** 2).sum(), [a, w])
        assert err < 1e-6

    def test_batched_both_sides_gradient(self):
        rng = np.random.default_rng(3)
        a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((2, 4, 3)), requires_grad=True)
        err = finite_diff_check(lambda: ((a @ b) ** 2).sum(), [a, b])
        assert err < 1e-6


class TestSoftmax:
    def test_symmetric_pair(self):
        out = softmax(Tensor([0.0, 0.0]), axis=0)
        assert np.allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_huge_values_do_not_overflow(self):
        out = softmax(Tensor([1000.0, 1000.0]), axis=0)
        assert np.all(np.isfinite(out.data))
        assert np.allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal(8)
        for c in (-3.0, 0.5, 100.0):
            a = softmax(Tensor(x), axis=0).data
            b = softmax(Tensor(x + c), axis=0).data
            assert np.allclose(a, b, atol=1e-14)

    def test_slices_sum_to_one(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((6, 7)) * 10)
        for axis in (0, 1, -1):
            sums = softmax(x, axis=axis).data.sum(axis=axis)
            assert np.all(np.abs(sums - 1.0) <= 1e-12)
        assert np.all(softmax(x, axis=1).data >= 0)

    def test_axis_out_of_range(self):
        with pytest.raises(ShapeError):
            softmax(Tensor([1.0, 2.0]), axis=2)

    def test_gradient(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        c = rng.standard_normal((3, 4))
        err = finite_diff_check(lambda: (softmax(x, axis=1) * c).sum(), [x])
        assert err < 1e-6


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        out = layer_norm(Tensor([5.0, 5.0, 5.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        assert np.allclose(out.data, 0.0)

    def test_row_statistics(self):
        out = layer_norm(Tensor([1.0, 2.0, 3.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                         eps=1e-12)
        assert abs(out.data.mean()) < 1e-9
        assert abs(out.data.var() - 1.0) < 1e-6

    def test_batch_rows_normalized(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((5, 8)) * 3 + 2)
        out = layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)), eps=1e-12).data
        assert np.all(np.abs(out.mean(axis=-1)) < 1e-9)
        assert np.all(np.abs(out.var(axis=-1) - 1.0) < 1e-9)

    def test_eps_must_be_positive(self):
        with pytest.raises(ConfigError):
            layer_norm(Tensor([1.0, 2.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)

    def test_affine_shape_mismatch(self):
        with pytest.raises(ShapeError):
            layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))

    def test_gradient_on_2x4(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
        g = Tensor(rng.standard_normal(4), requires_grad=True)
        b = Tensor(rng.standard_normal(4), requires_grad=True)
        c = rng.standard_normal((2, 4))
        err = finite_diff_check(lambda: (layer_norm(x, g, b) * c).sum(), [x, g, b])
        assert err < 1e-5


class TestGelu:
    def test_zero(self):
        assert gelu(Tensor([0.0])).data[0] == 0.0

    def test_positive_asymptote(self):
        assert abs(gelu(Tensor([10.0])).data[0] - 10.0) < 1e-6

    def test_matches_normal_cdf_definition(self):
        from scipy.stats import norm
        x = np.array([-2.0, -0.5, 0.5, 2.0])
        assert np.allclose(gelu(Tensor(x)).data, x * norm.cdf(x), atol=1e-12)

    def test_gradient_at_reference_points(self):
        for point in (-2.0, -0.5, 0.5, 2.0):
            x = Tensor([point], requires_grad=True)
            err = finite_diff_check(lambda: gelu(x).sum(), [x])
            assert err < 1e-6, f"gelu gradient off at {point}"


class TestBackward:
    def test_square(self):
        x = Tensor([3.0], requires_grad=True)
        (x * x).sum().backward()
        assert np.allclose(x.grad, [6.0])

    def test_softmax_sum_is_constant(self):
        x = Tensor([0.3, -1.2, 2.0], requires_grad=True)
        softmax(x, axis=0).sum().backward()
        assert np.all(np.abs(x.grad) < 1e-12)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            (x * 2).backward()

    def test_k_copies_accumulate_k_times(self):
        x = Tensor([1.5, -2.0], requires_grad=True)
        (x * 3.0).sum().backward()
        single = x.grad.copy()
        for k in (2, 5):
            y = Tensor([1.5, -2.0], requires_grad=True)
            total = (y * 3.0).sum()
            for _ in range(k - 1):
                total = total + (y * 3.0).sum()
            total.backward()
            assert np.allclose(y.grad, k * single)

    def test_each_op_replayed_once(self):
        # diamond graph: z used twice; its backward must fire exactly once
        x = Tensor([2.0], requires_grad=True)
        z = x * 3.0
        (z + z).sum().backward()
        assert np.allclose(x.grad, [6.0])

    def test_second_backward_is_inert(self):
        x = Tensor([2.0], requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        first = x.grad.copy()
        loss.backward()  # graph consumed; must not double anything
        assert np.allclose(x.grad, first)

    def test_no_grad_blocks_recording(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad and y._backward_fn is None

    def test_grad_shapes_match_parameters(self):
        rng = np.random.default_rng(9)
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal(4), requires_grad=True)
        ((a + b) ** 2).sum().backward()
        assert a.grad.shape == a.shape
        assert b.grad.shape == b.shape


class TestMiscOps:
    def test_slice_gradient(self):
        x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        x[1, :].sum().backward()
        expected = np.zeros((3, 4))
        expected[1, :] = 1.0
        assert np.array_equal(x.grad, expected)

    def test_take_rows_with_duplicates(self):
        x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        x.take_rows([0, 0, 2]).sum().backward()
        assert np.array_equal(x.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])

    def test_concat_gradient(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.ones((3, 2)), requires_grad=True)
        (concat([a, b], axis=0) * 2.0).sum().backward()
        assert np.all(a.grad == 2.0) and np.all(b.grad == 2.0)

    def test_logsumexp_matches_log_sum_exp(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((4, 6))
        out = logsumexp(Tensor(x), axis=1)
        assert np.allclose(out.data, np.log(np.exp(x).sum(axis=1)), atol=1e-12)

    def test_logsumexp_stable_and_differentiable(self):
        x = Tensor(np.array([[1000.0, 1000.0]]), requires_grad=True)
        out = logsumexp(x, axis=1).sum()
        assert np.isfinite(out.item())
        out.backward()
        assert np.allclose(x.grad, [[0.5, 0.5]])

    def test_l2_normalize_unit_norm_and_gradient(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
        out = l2_normalize(x)
        assert np.allclose(np.linalg.norm(out.data, axis=1), 1.0, atol=1e-12)
        c = rng.standard_normal((3, 5))
        err = finite_diff_check(lambda: (l2_normalize(x) * c).sum(), [x])
        assert err < 1e-6

    def test_reshape_swapaxes_gradients(self):
        rng = np.random.default_rng(12)
        x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        c = rng.standard_normal((4, 6))
        err = finite_diff_check(
            lambda: (x.swapaxes(0, 2).reshape(4, 6) * c).sum(), [x])
        assert err < 1e-6

    def test_division_and_sqrt_gradients(self):
        x = Tensor([4.0, 9.0], requires_grad=True)
        err = finite_diff_check(lambda: (x.sqrt() / 2.0 + 1.0 / x).sum(), [x])
        assert err < 1e-6

    def test_mean_matches_sum_over_count(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((3, 5))
        assert np.allclose(Tensor(x).mean(axis=1).data, x.mean(axis=1), atol=1e-15)

    def test_trunc_normal_bounded(self):
        t = trunc_normal((1000,), np.random.default_rng(14), std=0.02)
        assert np.all(np.abs(t.data) <= 0.04)


class TestFiniteDiffCheck:
    def test_quadratic_is_exact_to_roundoff(self):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        err = finite_diff_check(lambda: (x * x).sum(), [x])
        assert err < 1e-9

    def test_constant_function_zero_error(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        err = finite_diff_check(lambda: (x * 0.0).sum(), [x])
        assert err == 0.0

    def test_eps_range_enforced(self):
        x = Tensor([1.0], requires_grad=True)
        with pytest.raises(ConfigError):
            finite_diff_check(lambda: (x * x).sum(), [x], eps=1e-2)
        with pytest.raises(ConfigError):
            finite_diff_check(lambda: (x * x).sum(), [x], eps=1e-8)

    def test_non_scalar_function_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            finite_diff_check(lambda: x * x, [x])
