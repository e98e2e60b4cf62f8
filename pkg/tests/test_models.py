import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pfbr import models as mdl
from pfbr.errors import BadLabelError, DimMismatchError, DimTooSmallError, NoOracleError, NonSPDError
from pfbr.ode import IntegratorConfig, solve_ivp
from pfbr.rng import Rng

from conftest import central_diff


def check_grad(model, obs, x):
    g = model.grad_x_log_lik(obs, x)
    fd = central_diff(lambda z: model.log_lik(obs, z), x)
    assert np.max(np.abs(g - fd) / np.maximum(1.0, np.abs(fd))) < 1e-6


class TestGaussianPosterior:
    def test_log_density_matches_scipy(self, rng):
        from scipy.stats import multivariate_normal
        A = rng.normal((3, 3))
        post = mdl.GaussianPosterior(rng.normal(3), A @ A.T + np.eye(3))
        x = rng.normal((5, 3))
        np.testing.assert_allclose(post.log_density(x),
                                   multivariate_normal(post.mean, post.cov).logpdf(x), rtol=1e-12)

    def test_not_spd(self):
        with pytest.raises(NonSPDError):
            mdl.GaussianPosterior([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(NonSPDError):
            mdl.GaussianPosterior([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])

    def test_sampler_moments(self):
        cov = np.array([[2.0, 0.6], [0.6, 0.5]])
        post = mdl.GaussianPosterior([1.0, -1.0], cov)
        n = 100_000
        x = post.sample(Rng(0), n)
        assert np.all(np.abs(x.mean(axis=0) - post.mean) < 4.0 * post.std / math.sqrt(n))
        assert np.linalg.norm(np.cov(x.T) - cov) < 0.1 * np.linalg.norm(cov)

    def test_entropy(self):
        post = mdl.GaussianPosterior([0.0], [[4.0]])
        np.testing.assert_allclose(post.entropy(), 0.5 * math.log(2 * math.pi * math.e * 4.0))


class TestGaussianModel:
    def test_one_observation(self):
        post = mdl.mvn_model(1, 3.0).posterior([[[0.0]]])[0]
        np.testing.assert_allclose(post.mean, [0.0], atol=1e-15)
        np.testing.assert_allclose(post.cov, [[0.75]], rtol=1e-14)

    @pytest.mark.parametrize("m", [1, 4, 17])
    def test_m_observations(self, m, rng):
        model = mdl.mvn_model(2, 3.0)
        obs = rng.normal((m, 2)) + 1.0
        post = model.posterior([obs])[0]
        np.testing.assert_allclose(post.mean, m / (m + 3.0) * obs.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(post.cov, 3.0 / (m + 3.0) * np.eye(2), rtol=1e-12)

    def test_sequential_equals_batch(self, rng):
        model = mdl.mvn_model(2, 3.0)
        obs = rng.normal((6, 2))
        seq = model.posterior([obs[i:i + 1] for i in range(6)])[-1]
        once = model.posterior([obs])[0]
        np.testing.assert_allclose(seq.mean, once.mean, rtol=1e-12)
        np.testing.assert_allclose(seq.cov, once.cov, rtol=1e-12)

    def test_no_observations(self):
        assert mdl.mvn_model(1).posterior([]) == []
        post = mdl.conjugate_posterior(mdl.GaussianPosterior([0.0], [[1.0]]), [[3.0]], [])
        np.testing.assert_array_equal(post.cov, [[1.0]])

    def test_gradient(self, rng):
        model = mdl.mvn_model(3, 2.0)
        check_grad(model, rng.normal((4, 3)), rng.normal(3))

    def test_accumulator_matches_direct_sum(self, rng):
        model = mdl.mvn_model(2, 3.0)
        acc = model.accumulator()
        batches = [rng.normal((2, 2)) for _ in range(3)]
        for b in batches:
            acc.add(b)
        x = rng.normal((5, 2))
        direct = sum(model.log_lik(b, x) for b in batches)
        np.testing.assert_allclose(acc.log_lik(x), direct, rtol=1e-12)
        np.testing.assert_allclose(acc.grad(x), sum(model.grad_x_log_lik(b, x) for b in batches),
                                   rtol=1e-12)

    def test_dimension_checks(self):
        model = mdl.mvn_model(2)
        with pytest.raises(DimMismatchError):
            model.log_lik([[0.0, 0.0]], [1.0, 2.0, 3.0])
        with pytest.raises(DimMismatchError):
            model.log_lik([[0.0, 0.0, 0.0]], [1.0, 2.0])


class TestMixture:
    def test_trivial_point(self):
        np.testing.assert_allclose(mdl.gmm_model().log_lik([[0.0]], [0.0, 0.0]),
                                   -0.5 * math.log(2 * math.pi), rtol=1e-15)

    def test_two_modes_have_equal_population_likelihood(self):
        model = mdl.gmm_model()
        o = np.linspace(-8.0, 8.0, 4001)
        dens = 0.5 * (np.exp(-0.5 * (o - 1.0) ** 2) + np.exp(-0.5 * (o + 1.0) ** 2))
        dens /= dens.sum()
        a = dens @ np.array([model.log_lik([[v]], [1.0, -2.0]) for v in o])
        b = dens @ np.array([model.log_lik([[v]], [-1.0, 2.0]) for v in o])
        np.testing.assert_allclose(a, b, rtol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_gradient(self, seed):
        rng = Rng(seed)
        check_grad(mdl.gmm_model(), rng.normal((3, 1)) * 2.0, rng.normal(2) * 2.0)

    def test_generator(self):
        o = mdl.gmm_model().sample_observations(Rng(0), count=20000)
        assert abs(o.mean() - 0.5 * (1.0 + (-1.0))) < 0.05
        assert abs(o.var() - 2.0) < 0.1


class TestLDS:
    def test_sigma1_must_be_spd(self):
        with pytest.raises(NonSPDError):
            mdl.lds_model(np.eye(2), np.eye(2), np.zeros((2, 2)), np.eye(2))

    def test_transition_mean(self):
        A = np.array([[0.9, 0.2], [-0.1, 0.8]])
        model = mdl.lds_model(A, np.eye(2), np.eye(2), np.eye(2))
        x0 = np.array([1.0, -2.0])
        n = 20000
        x = model.lds_transition(np.tile(x0, (n, 1)), Rng(3))
        assert np.all(np.abs(x.mean(axis=0) - A @ x0) < 3.0 / math.sqrt(n))

    def test_gradient(self, rng):
        model = mdl.random_lds(rng, d=3, obs_dim=2, noise=0.2)
        check_grad(model, rng.normal((2, 2)), rng.normal(3))

    def test_static_limit_is_conjugate(self):
        prior = mdl.GaussianPosterior([0.0], [[1.0]])
        kal = mdl.kalman_filter([[1.0]], [[1.0]], [[1e-12]], [[3.0]], prior, [[[1.2]]])[0]
        conj = mdl.conjugate_posterior(prior, [[3.0]], [[1.2]])
        np.testing.assert_allclose(kal.mean, conj.mean, atol=1e-8)
        np.testing.assert_allclose(kal.cov, conj.cov, atol=1e-8)

    def test_empty_and_spd(self, rng):
        model = mdl.random_lds(rng, d=2)
        assert model.posterior([]) == []
        _, obs = model.sample_sequence(rng, 30)
        for post in model.posterior([o[None, :] for o in obs]):
            np.linalg.cholesky(post.cov)

    def test_singular_innovation(self):
        prior = mdl.GaussianPosterior([0.0], [[1.0]])
        with pytest.raises(NonSPDError):
            mdl.kalman_filter([[1.0]], [[1.0]], [[1.0]], [[0.0]], prior, [[[0.0]]])


class TestLogistic:
    def test_zero_weights(self, rng):
        model = mdl.LogisticRegressionModel(3)
        obs = np.concatenate([rng.normal((4, 3)), [[1.0], [-1.0], [1.0], [1.0]]], axis=1)
        np.testing.assert_allclose(model.log_lik(obs[:1], np.zeros(3)), -math.log(2.0))
        np.testing.assert_allclose(model.log_lik(obs, np.zeros(3)), -4 * math.log(2.0))

    def test_gradient_formula(self, rng):
        model = mdl.LogisticRegressionModel(3)
        f, y, x = rng.normal(3), -1.0, rng.normal(3)
        obs = np.append(f, y)[None, :]
        expected = y * f / (1.0 + math.exp(y * f @ x))
        np.testing.assert_allclose(model.grad_x_log_lik(obs, x), expected, rtol=1e-12)
        check_grad(model, obs, x)

    def test_bad_label(self):
        with pytest.raises(BadLabelError):
            mdl.LogisticRegressionModel(1).log_lik([[0.5, 0.0]], [1.0])
        with pytest.raises(BadLabelError):
            mdl.blr_model(mdl.Dataset([[1.0], [2.0]], [0.0, 1.0]))

    def test_no_oracle(self):
        with pytest.raises(NoOracleError):
            mdl.LogisticRegressionModel(2).posterior([])

    def test_rotation(self, rng):
        data = mdl.Dataset(rng.normal((10, 3)), np.ones(10))
        np.testing.assert_array_equal(mdl.rotate_features(data, 0.0).features, data.features)
        quarter = mdl.rotate_features(mdl.Dataset([[1.0, 0.0, 5.0]], [1.0]), math.pi / 2)
        np.testing.assert_allclose(quarter.features, [[0.0, 1.0, 5.0]], atol=1e-12)
        turned = mdl.rotate_features(data, 0.2)
        np.testing.assert_allclose(np.linalg.norm(turned.features, axis=1),
                                   np.linalg.norm(data.features, axis=1), rtol=1e-12)
        with pytest.raises(DimTooSmallError):
            mdl.rotate_features(mdl.Dataset([[1.0]], [1.0]), 0.1)

    def test_pca(self, rng):
        X = rng.normal((500, 4)) * np.array([5.0, 2.0, 1.0, 0.1])
        proj, comps, mean = mdl.pca_project(X, 2)
        assert proj.shape == (500, 2)
        np.testing.assert_allclose(comps @ comps.T, np.eye(2), atol=1e-12)
        assert abs(abs(comps[0, 0]) - 1.0) < 0.01
        assert proj[:, 0].var() > proj[:, 1].var()


class TestFokkerPlanck:
    def test_endpoints(self):
        _, (mu0, v0) = mdl.analytic_fp_flow_1d((0.5, 2.0), (1.0, 3.0), 0.0)
        assert (mu0, v0) == (0.5, 2.0)
        _, (mu, v) = mdl.analytic_fp_flow_1d((0.5, 2.0), (1.0, 3.0), 200.0)
        post = mdl.conjugate_posterior(mdl.GaussianPosterior([0.5], [[2.0]]), [[3.0]], [[1.0]])
        np.testing.assert_allclose([mu, v], [post.mean[0], post.cov[0, 0]], atol=1e-6)

    def test_particles_follow_moments(self):
        flow, (mu, v) = mdl.analytic_fp_flow_1d((0.0, 1.0), (2.0, 3.0), 0.4)
        x0 = Rng(0).normal(10_000)
        x = solve_ivp(lambda s, t: flow.velocity(s, t), x0, IntegratorConfig("rk4", 40, 0.0, 0.4))
        n = x0.size
        assert abs(x.mean() - mu) < 4.0 * math.sqrt(v / n)
        assert abs(x.var() - v) < 4.0 * v * math.sqrt(2.0 / n)

    def test_divergence_matches_velocity_slope(self):
        flow = mdl.FokkerPlanckFlow1D((0.0, 1.0), (2.0, 3.0))
        h = 1e-5
        slope = (flow.velocity(h, 0.3) - flow.velocity(-h, 0.3)) / (2 * h)
        np.testing.assert_allclose(flow.divergence(0.3), slope, rtol=1e-8)


class TestRoundTrip:
    @pytest.mark.parametrize("model", [mdl.mvn_model(2), mdl.gmm_model(),
                                       mdl.random_lds(Rng(0)), mdl.LogisticRegressionModel(3)])
    def test_to_from_dict(self, model):
        back = mdl.model_from_dict(model.to_dict())
        assert back.to_dict() == model.to_dict()
