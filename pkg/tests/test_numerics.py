import numpy as np
import pytest

from linattn.numerics import (
    GradCheckReport,
    RngStream,
    finite_diff_grad,
    grad_check,
    relative_error,
    seeded_gaussian,
    softmax_rows,
)


class TestSoftmaxRows:
    def test_uniform_over_equal_logits(self):
        out = softmax_rows([[0.0, 0.0], [0.0, 0.0]])
        np.testing.assert_allclose(out, [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)

    def test_analytic_ln2(self):
        out = softmax_rows([[np.log(2.0), 0.0]])
        np.testing.assert_allclose(out, [[2 / 3, 1 / 3]], atol=1e-15)

    def test_causal_support_and_row_sums(self):
        rng = RngStream(3)
        m = rng.gaussian(4, 4)
        out = softmax_rows(m, mask_causal=True)
        for i in range(4):
            assert np.count_nonzero(out[i]) == i + 1
            assert abs(out[i].sum() - 1.0) < 1e-12
            assert np.all(out[i, i + 1 :] == 0.0)

    @pytest.mark.parametrize("seed", range(10))
    def test_row_stochastic_property(self, seed):
        rng = RngStream(seed)
        rows = int(rng.integers(1, 12))
        cols = int(rng.integers(1, 12))
        m = rng.gaussian(rows, cols) * 10
        out = softmax_rows(m)
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_per_row_shift_invariance(self, seed):
        # Dyadic entries keep m + shift exact, so the row-max subtraction
        # must make the two results identical bit for bit.
        rng = RngStream(100 + seed)
        m = np.round(rng.gaussian(6, 5) * 1024) / 1024
        shifts = np.round(rng.gaussian(6, 1) * 1024) / 1024
        np.testing.assert_array_equal(softmax_rows(m + shifts), softmax_rows(m))

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError, match="empty input"):
            softmax_rows(np.zeros((0, 3)))

    def test_nan_input_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            softmax_rows([[0.0, np.nan]])


class TestFiniteDiffGrad:
    def test_quadratic(self):
        g = finite_diff_grad(lambda t: float(t[0] ** 2), np.array([3.0]), eps=1e-5)
        np.testing.assert_allclose(g, [6.0], atol=1e-6)

    def test_constant_function(self):
        g = finite_diff_grad(lambda t: 7.5, np.array([1.0, -2.0, 0.3]))
        np.testing.assert_allclose(g, 0.0, atol=1e-9)

    def test_quadratic_form_matches_analytic(self):
        # f(theta) = theta^T A theta has gradient (A + A^T) theta.
        rng = RngStream(11)
        a = rng.gaussian(4, 4) * 0.5
        theta = rng.gaussian(4, 1)[:, 0]
        analytic = (a + a.T) @ theta
        numeric = finite_diff_grad(lambda t: float(t @ a @ t), theta)
        np.testing.assert_allclose(numeric, analytic, rtol=1e-6, atol=1e-8)

    def test_eps_range_enforced(self):
        with pytest.raises(ValueError, match="eps"):
            finite_diff_grad(lambda t: 0.0, np.zeros(1), eps=1e-2)

    def test_nonfinite_evaluation_names_coordinate(self):
        def f(t):
            with np.errstate(invalid="ignore"):
                return float(np.sqrt(t[1]))

        with pytest.raises(ValueError, match="coordinate 1"):
            finite_diff_grad(f, np.array([1.0, 0.0]))


class TestSeededGaussian:
    def test_same_seed_identical(self):
        a = seeded_gaussian(RngStream(42), 8, 8)
        b = seeded_gaussian(RngStream(42), 8, 8)
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        a = seeded_gaussian(RngStream(1), 4, 4)
        b = seeded_gaussian(RngStream(2), 4, 4)
        assert np.any(a != b)

    def test_moments(self):
        draws = seeded_gaussian(RngStream(7), 1000, 100)
        assert abs(draws.mean()) < 0.02
        assert abs(draws.var() - 1.0) < 0.05

    def test_zero_dims_rejected(self):
        with pytest.raises(ValueError):
            seeded_gaussian(RngStream(0), 0, 3)

    def test_split_streams_independent_of_draw_order(self):
        root = RngStream(5)
        child_before = root.split(3).gaussian(2, 2)
        root.gaussian(10, 10)  # advance the parent
        child_after = RngStream(5).split(3).gaussian(2, 2)
        np.testing.assert_array_equal(child_before, child_after)


class TestGradCheck:
    def test_report_fields(self):
        theta = np.array([1.0, 2.0])
        report = grad_check(
            lambda t: float(t @ t), 2 * theta, theta
        )
        assert isinstance(report, GradCheckReport)
        assert report.max_rel_error < 1e-9

    def test_detects_wrong_gradient(self):
        theta = np.array([1.0, 2.0])
        report = grad_check(lambda t: float(t @ t), 3 * theta, theta)
        assert report.max_rel_error > 0.1

    def test_relative_error_floor(self):
        assert relative_error(np.array([0.0]), np.array([0.0]))[0] == 0.0
        # denominator floored at 1e-8
        assert relative_error(np.array([1e-12]), np.array([0.0]))[0] == pytest.approx(
            1e-4
        )
