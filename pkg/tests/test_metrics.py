import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pfbr.errors import ConfigError, DimMismatchError
from pfbr.metrics import (KERNELS, KernelSpec, closed_form, cross_entropy, default_tests,
                          integral_discrepancy, median_heuristic, mmd2, monte_carlo)
from pfbr.models import GaussianPosterior
from pfbr.rng import Rng


class TestMMD:
    @pytest.mark.parametrize("kind", KERNELS)
    def test_identical_sets(self, kind, rng):
        X = rng.normal((50, 2))
        assert mmd2(X, X.copy(), KernelSpec(kind)) == 0.0

    @pytest.mark.parametrize("kind", KERNELS)
    def test_symmetric_bit_exact(self, kind, rng):
        X, Y = rng.normal((40, 2)), rng.normal((60, 2)) + 0.5
        assert mmd2(X, Y, KernelSpec(kind)) == mmd2(Y, X, KernelSpec(kind))

    def test_gaussian_closed_form(self):
        X = Rng(0).normal((2000, 1))
        Y = Rng(1).normal((2000, 1)) + 3.0
        # E k(x, y) for unit Gaussians under RBF with lengthscale 1: sqrt(1/3) exp(-dmu^2 / 6)
        exact = 2.0 * math.sqrt(1.0 / 3.0) * (1.0 - math.exp(-9.0 / 6.0))
        est = mmd2(X, Y, KernelSpec("rbf", lengthscale=1.0))
        assert abs(est - exact) < 0.1 * exact

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), kind=st.sampled_from(["rbf", "laplacian"]),
           shift=st.floats(-3, 3))
    def test_non_negative(self, seed, kind, shift):
        rng = Rng(seed)
        assert mmd2(rng.normal((15, 2)), rng.normal((9, 2)) + shift, KernelSpec(kind)) >= -1e-12

    def test_permutation_invariant(self, rng):
        X, Y = rng.normal((30, 2)), rng.normal((30, 2)) + 1.0
        a = mmd2(X, Y)
        b = mmd2(X[::-1], Y[np.argsort(rng.uniform(30))])
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_median_heuristic_order_free_for_large_pools(self, rng):
        X, Y = rng.normal((1500, 2)), rng.normal((1500, 2))
        assert median_heuristic(X, Y) == median_heuristic(Y[::-1], X[::-1])

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimMismatchError):
            mmd2(rng.normal((5, 2)), rng.normal((5, 3)))

    def test_bad_kernel(self):
        with pytest.raises(ConfigError):
            KernelSpec("gaussian")
        with pytest.raises(ConfigError):
            KernelSpec("rbf", lengthscale=0.0)


class TestCrossEntropy:
    def test_matches_entropy(self):
        p = Rng(0).normal((10_000, 1))
        q = Rng(1).normal((10_000, 1))
        assert abs(cross_entropy(p, q) - 0.5 * math.log(2 * math.pi * math.e)) < 0.1

    def test_shift_increases(self, rng):
        p, q = rng.normal((500, 1)), rng.normal((500, 1))
        assert cross_entropy(p, q + 5.0) > cross_entropy(p, q)

    def test_order_invariant(self, rng):
        p, q = rng.normal((200, 2)), rng.normal((300, 2))
        np.testing.assert_allclose(cross_entropy(p, q), cross_entropy(p[::-1], q[::-1]),
                                   rtol=1e-12)

    def test_fixed_bandwidth(self, rng):
        p, q = rng.normal((100, 1)), rng.normal((100, 1))
        assert cross_entropy(p, q, 0.3) != cross_entropy(p, q, 0.6)


class TestIntegrals:
    def test_quadratic_truth_is_trace(self):
        for d in (1, 3):
            truth = GaussianPosterior(np.zeros(d), np.eye(d))
            assert closed_form({"kind": "quadratic", "A": np.eye(d)}, truth) == d

    def test_bilinear_reduces_to_quadratic(self, rng):
        A = rng.normal((3, 3))
        truth = GaussianPosterior(rng.normal(3), A @ A.T + np.eye(3))
        quad = closed_form({"kind": "quadratic", "A": np.eye(3)}, truth)
        bil = closed_form({"kind": "bilinear", "A": np.eye(3), "B": np.eye(3),
                           "a": np.zeros(3), "b": np.zeros(3)}, truth)
        assert abs(quad - bil) < 1e-12
        np.testing.assert_allclose(quad, np.trace(truth.cov) + truth.mean @ truth.mean, rtol=1e-14)

    def test_exact_draws_have_small_discrepancy(self):
        truth = GaussianPosterior([0.5, -1.0], [[1.0, 0.3], [0.3, 0.5]])
        n = 10_000
        x = truth.sample(Rng(3), n)
        mean_err = integral_discrepancy(x, truth)[0]
        assert mean_err < 4.0 * math.sqrt(np.trace(truth.cov) / n)

    def test_closed_form_matches_monte_carlo(self):
        truth = GaussianPosterior([0.3, -0.7], [[0.8, -0.2], [-0.2, 0.4]])
        x = truth.sample(Rng(5), 1_000_000)
        for spec in default_tests(2):
            vals = monte_carlo(spec, x)
            se = vals.std(axis=0) / math.sqrt(len(x))
            assert np.all(np.abs(vals.mean(axis=0) - closed_form(spec, truth)) < 3.0 * se)

    def test_dimension_checks(self, rng):
        truth = GaussianPosterior(np.zeros(2), np.eye(2))
        with pytest.raises(DimMismatchError):
            integral_discrepancy(rng.normal((4, 3)), truth)
        with pytest.raises(DimMismatchError):
            closed_form({"kind": "quadratic", "A": np.eye(3)}, truth)
        with pytest.raises(ConfigError):
            closed_form({"kind": "cubic"}, truth)
