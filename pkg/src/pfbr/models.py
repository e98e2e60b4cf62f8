"""Bayesian model plug-ins and their exact-posterior oracles.

Every model evaluates vectorised over particles: ``x`` is ``(N, d)`` (or a
single ``(d,)`` state) and an observation batch is ``(L, obs_dim)``; the
log-likelihood of a batch is the sum over its rows.
"""
import math
from dataclasses import dataclass

import numpy as np

from .errors import BadLabelError, DimMismatchError, DimTooSmallError, NoOracleError, NonSPDError

LOG_2PI = math.log(2.0 * math.pi)


def _rows(x, d):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        if a.size != d:
            raise DimMismatchError(f"state has {a.size} entries, model dimension is {d}")
        return a.reshape(1, d), True
    if a.shape[1] != d:
        raise DimMismatchError(f"states have dim {a.shape[1]}, model dimension is {d}")
    return a, False


def _batch(obs, k):
    o = np.asarray(obs, dtype=np.float64)
    if o.ndim <= 1:
        o = o.reshape(1, k) if o.size == k else o.reshape(-1, k)
    if o.shape[1] != k:
        raise DimMismatchError(f"observation has dim {o.shape[1]}, model expects {k}")
    return o


def _out(v, single):
    return float(v[0]) if single else v


def cholesky(cov, what="covariance"):
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    if cov.shape[0] != cov.shape[1]:
        raise NonSPDError(f"{what} is not square")
    if not np.allclose(cov, cov.T, atol=1e-12, rtol=0):
        raise NonSPDError(f"{what} is not symmetric")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as err:
        raise NonSPDError(f"{what} is not positive definite") from err


class GaussianPosterior:
    """``N(mean, cov)`` with a validated Cholesky factor."""

    def __init__(self, mean, cov):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=np.float64)).copy()
        self.cov = np.atleast_2d(np.asarray(cov, dtype=np.float64)).copy()
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise DimMismatchError("mean and covariance sizes differ")
        self.chol = cholesky(self.cov)

    @property
    def d(self):
        return self.mean.size

    def sample(self, rng, n):
        return self.mean + rng.normal((n, self.d)) @ self.chol.T

    def log_density(self, x):
        rows, single = _rows(x, self.d)
        z = np.linalg.solve(self.chol, (rows - self.mean).T)
        logdet = 2.0 * np.log(np.diag(self.chol)).sum()
        return _out(-0.5 * (self.d * LOG_2PI + logdet + (z * z).sum(axis=0)), single)

    def grad_log_density(self, x):
        rows, single = _rows(x, self.d)
        g = -np.linalg.solve(self.cov, (rows - self.mean).T).T
        return g[0] if single else g

    def entropy(self):
        logdet = 2.0 * np.log(np.diag(self.chol)).sum()
        return 0.5 * (self.d * (1.0 + LOG_2PI) + logdet)

    @property
    def std(self):
        return np.sqrt(np.diag(self.cov))

    def to_dict(self):
        return {"kind": "gaussian", "mean": self.mean.tolist(), "cov": self.cov.tolist()}

    def __repr__(self):
        return f"GaussianPosterior(mean={self.mean}, cov={self.cov.tolist()})"


class Accumulator:
    """Running ``sum_t log p(o_t | x)`` over every batch seen so far."""

    def __init__(self, model):
        self.model = model
        self.batches = []

    def add(self, batch):
        self.batches.append(_batch(batch, self.model.obs_dim))

    def _all(self):
        return np.concatenate(self.batches) if self.batches else np.zeros((0, self.model.obs_dim))

    def log_lik(self, x):
        if not self.batches:
            return np.zeros(np.atleast_2d(x).shape[0])
        return self.model.log_lik(self._all(), x)

    def grad(self, x):
        if not self.batches:
            return np.zeros_like(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        return self.model.grad_x_log_lik(self._all(), x)


class Model:
    """Prior, likelihood and gradients; subclasses fill in the details."""

    family = "abstract"
    hidden_markov = False

    def __init__(self, d, obs_dim, prior=None):
        self.d = int(d)
        self.obs_dim = int(obs_dim)
        self.prior = prior if prior is not None else GaussianPosterior(np.zeros(d), np.eye(d))

    def log_prior(self, x):
        return self.prior.log_density(x)

    def grad_log_prior(self, x):
        return self.prior.grad_log_density(x)

    def sample_prior(self, rng, n):
        return self.prior.sample(rng, n)

    def log_lik(self, obs, x):
        raise NotImplementedError

    def grad_x_log_lik(self, obs, x):
        raise NotImplementedError

    def accumulator(self):
        return Accumulator(self)

    def posterior(self, observations, prior=None):
        raise NoOracleError(f"no exact posterior for the {self.family} model")

    @property
    def has_oracle(self):
        return False

    def to_dict(self):
        raise NotImplementedError


class GaussianAccumulator(Accumulator):
    """Sufficient statistics make every stage O(1) in the sequence length."""

    def __init__(self, model):
        super().__init__(model)
        k = model.obs_dim
        self.count = 0
        self.total = np.zeros(k)
        self.quad = 0.0

    def add(self, batch):
        o = _batch(batch, self.model.obs_dim)
        P = self.model.noise_precision
        self.count += o.shape[0]
        self.total = self.total + o.sum(axis=0)
        self.quad += float(np.einsum("li,ij,lj->", o, P, o))

    def log_lik(self, x):
        rows, single = _rows(x, self.model.d)
        P = self.model.noise_precision
        m = self.count
        xp = rows @ P
        quad = self.quad - 2.0 * xp @ self.total + m * (xp * rows).sum(axis=1)
        return _out(-0.5 * (m * self.model.noise_lognorm + quad), single)

    def grad(self, x):
        rows, single = _rows(x, self.model.d)
        g = (self.total - self.count * rows) @ self.model.noise_precision
        return g[0] if single else g


class GaussianModel(Model):
    """``x ~ N(mu_x, Sigma_x)``, ``o | x ~ N(x, Sigma_o)``."""

    family = "gaussian"

    def __init__(self, prior_mean, prior_cov, noise_cov):
        prior = GaussianPosterior(prior_mean, prior_cov)
        super().__init__(prior.d, prior.d, prior)
        self.noise_cov = np.atleast_2d(np.asarray(noise_cov, dtype=np.float64))
        chol = cholesky(self.noise_cov, "observation covariance")
        self.noise_precision = np.linalg.inv(self.noise_cov)
        self.noise_lognorm = self.d * LOG_2PI + 2.0 * np.log(np.diag(chol)).sum()

    def log_lik(self, obs, x):
        rows, single = _rows(x, self.d)
        o = _batch(obs, self.obs_dim)
        diff = o[None, :, :] - rows[:, None, :]
        quad = np.einsum("nli,ij,nlj->n", diff, self.noise_precision, diff)
        return _out(-0.5 * (o.shape[0] * self.noise_lognorm + quad), single)

    def grad_x_log_lik(self, obs, x):
        rows, single = _rows(x, self.d)
        o = _batch(obs, self.obs_dim)
        g = (o.sum(axis=0)[None, :] - o.shape[0] * rows) @ self.noise_precision
        return g[0] if single else g

    def accumulator(self):
        return GaussianAccumulator(self)

    @property
    def has_oracle(self):
        return True

    def posterior(self, observations, prior=None):
        """Conjugate posterior after each batch; ``prior`` defaults to the model's."""
        post = self.prior if prior is None else prior
        P0 = np.linalg.inv(post.cov)
        eta = P0 @ post.mean
        out = []
        for batch in observations:
            o = _batch(batch, self.obs_dim)
            P0 = P0 + o.shape[0] * self.noise_precision
            eta = eta + self.noise_precision @ o.sum(axis=0)
            cov = np.linalg.inv(P0)
            cov = 0.5 * (cov + cov.T)
            out.append(GaussianPosterior(cov @ eta, cov))
        return out

    def sample_observations(self, rng, truth, count):
        L = cholesky(self.noise_cov)
        return np.asarray(truth, dtype=np.float64) + rng.normal((count, self.d)) @ L.T

    def to_dict(self):
        return {"family": self.family, "prior_mean": self.prior.mean.tolist(),
                "prior_cov": self.prior.cov.tolist(), "noise_cov": self.noise_cov.tolist()}


def mvn_model(d, noise_scale=3.0):
    """Prior ``N(0, I_d)``, likelihood ``N(x, noise_scale * I_d)``."""
    if d < 1 or noise_scale <= 0:
        raise DimMismatchError("need d >= 1 and a positive noise scale")
    return GaussianModel(np.zeros(d), np.eye(d), noise_scale * np.eye(d))


def conjugate_posterior(prior, noise_cov, observations):
    """Single conjugate update of a Gaussian prior with i.i.d. ``N(x, noise_cov)`` data."""
    model = GaussianModel(prior.mean, prior.cov, noise_cov)
    obs = np.asarray(observations, dtype=np.float64).reshape(-1, prior.d)
    if obs.shape[0] == 0:
        return GaussianPosterior(prior.mean, prior.cov)
    return model.posterior([obs])[0]


class GaussianMixtureModel(Model):
    """``o ~ 0.5 N(x1, 1) + 0.5 N(x1 + x2, 1)`` with ``x1, x2 ~ N(0, 1)``."""

    family = "gmm"

    def __init__(self, truth=(1.0, -2.0)):
        super().__init__(2, 1)
        self.truth = np.asarray(truth, dtype=np.float64)

    def _components(self, o, rows):
        a = o[None, :, 0] - rows[:, 0:1]
        b = o[None, :, 0] - rows[:, 0:1] - rows[:, 1:2]
        la = -0.5 * LOG_2PI - 0.5 * a * a
        lb = -0.5 * LOG_2PI - 0.5 * b * b
        return a, b, la, lb

    def log_lik(self, obs, x):
        rows, single = _rows(x, 2)
        o = _batch(obs, 1)
        _, _, la, lb = self._components(o, rows)
        ll = np.logaddexp(la, lb) - math.log(2.0)
        return _out(ll.sum(axis=1), single)

    def grad_x_log_lik(self, obs, x):
        rows, single = _rows(x, 2)
        o = _batch(obs, 1)
        a, b, la, lb = self._components(o, rows)
        ra = 1.0 / (1.0 + np.exp(lb - la))
        rb = 1.0 - ra
        g = np.stack([(ra * a + rb * b).sum(axis=1), (rb * b).sum(axis=1)], axis=1)
        return g[0] if single else g

    def sample_observations(self, rng, truth=None, count=1):
        truth = self.truth if truth is None else np.asarray(truth, dtype=np.float64)
        pick = rng.uniform(count) < 0.5
        centre = np.where(pick, truth[0], truth[0] + truth[1])
        return (centre + rng.normal(count)).reshape(count, 1)

    def to_dict(self):
        return {"family": self.family, "truth": self.truth.tolist()}


def gmm_model(truth=(1.0, -2.0)):
    return GaussianMixtureModel(truth)


class LinearDynamicalSystem(Model):
    """``x_m = A x_{m-1} + eps``, ``o_m = B x_m + delta`` with Gaussian noises."""

    family = "lds"
    hidden_markov = True

    def __init__(self, A, B, Sigma1, Sigma2, prior=None):
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        B = np.atleast_2d(np.asarray(B, dtype=np.float64))
        d = A.shape[0]
        if A.shape != (d, d) or B.shape[1] != d:
            raise DimMismatchError("A must be d x d and B must have d columns")
        super().__init__(d, B.shape[0], prior)
        self.A, self.B = A, B
        self.Sigma1 = np.atleast_2d(np.asarray(Sigma1, dtype=np.float64))
        self.Sigma2 = np.atleast_2d(np.asarray(Sigma2, dtype=np.float64))
        self.chol1 = cholesky(self.Sigma1, "transition covariance")
        chol2 = cholesky(self.Sigma2, "observation covariance")
        self.P2 = np.linalg.inv(self.Sigma2)
        self.lognorm2 = self.obs_dim * LOG_2PI + 2.0 * np.log(np.diag(chol2)).sum()

    def log_lik(self, obs, x):
        rows, single = _rows(x, self.d)
        o = _batch(obs, self.obs_dim)
        diff = o[None, :, :] - (rows @ self.B.T)[:, None, :]
        quad = np.einsum("nli,ij,nlj->n", diff, self.P2, diff)
        return _out(-0.5 * (o.shape[0] * self.lognorm2 + quad), single)

    def grad_x_log_lik(self, obs, x):
        rows, single = _rows(x, self.d)
        o = _batch(obs, self.obs_dim)
        resid = o.sum(axis=0)[None, :] - o.shape[0] * rows @ self.B.T
        g = resid @ self.P2 @ self.B
        return g[0] if single else g

    def transition_noise(self, rng, n):
        return rng.normal((n, self.d)) @ self.chol1.T

    def lds_transition(self, positions, rng=None, noise=None):
        """Propagate particles ``A x + eps``; pass ``noise`` to fix the draws."""
        x, _ = _rows(positions, self.d)
        if noise is None:
            noise = self.transition_noise(rng, x.shape[0])
        return x @ self.A.T + noise

    def sample_sequence(self, rng, count):
        x = self.prior.sample(rng, 1)[0]
        states, obs = [], []
        L2 = cholesky(self.Sigma2)
        for _ in range(count):
            x = self.A @ x + self.chol1 @ rng.normal(self.d)
            states.append(x)
            obs.append(self.B @ x + L2 @ rng.normal(self.obs_dim))
        return np.array(states), np.array(obs)

    @property
    def has_oracle(self):
        return True

    def posterior(self, observations, prior=None):
        return kalman_filter(self.A, self.B, self.Sigma1, self.Sigma2,
                             self.prior if prior is None else prior, observations)

    def to_dict(self):
        return {"family": self.family, "A": self.A.tolist(), "B": self.B.tolist(),
                "Sigma1": self.Sigma1.tolist(), "Sigma2": self.Sigma2.tolist()}


def lds_model(A, B, Sigma1, Sigma2, prior=None):
    return LinearDynamicalSystem(A, B, Sigma1, Sigma2, prior)


def random_lds(rng, d=2, obs_dim=None, noise=0.1):
    """``A``, ``B`` with i.i.d. ``N(0, 1/d)`` entries, both noises ``noise * I``."""
    obs_dim = d if obs_dim is None else obs_dim
    A = rng.normal((d, d)) / math.sqrt(d)
    B = rng.normal((obs_dim, d)) / math.sqrt(d)
    return lds_model(A, B, noise * np.eye(d), noise * np.eye(obs_dim))


def kalman_filter(A, B, Sigma1, Sigma2, prior, observations):
    """Filtering marginals ``p(x_m | o_1..o_m)`` for every stage.

    Each stage predicts once and then absorbs every row of its batch.
    """
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    Sigma1, Sigma2 = np.atleast_2d(Sigma1), np.atleast_2d(Sigma2)
    cholesky(Sigma1, "transition covariance")
    cholesky(Sigma2, "observation covariance")
    mu, P = prior.mean.copy(), prior.cov.copy()
    d = mu.size
    out = []
    for batch in observations:
        mu = A @ mu
        P = A @ P @ A.T + Sigma1
        for o in _batch(batch, B.shape[0]):
            S = B @ P @ B.T + Sigma2
            try:
                Sc = np.linalg.cholesky(0.5 * (S + S.T))
            except np.linalg.LinAlgError as err:
                raise NonSPDError("innovation covariance is singular") from err
            K = np.linalg.solve(Sc.T, np.linalg.solve(Sc, B @ P)).T
            mu = mu + K @ (o - B @ mu)
            IKB = np.eye(d) - K @ B
            P = IKB @ P @ IKB.T + K @ Sigma2 @ K.T
            P = 0.5 * (P + P.T)
        out.append(GaussianPosterior(mu, P))
    return out


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        f = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        y = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        if f.shape[0] != y.size:
            raise DimMismatchError("features and labels have different lengths")
        if not np.all(np.isfinite(f)):
            raise DimMismatchError("features must be finite")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.size

    def observations(self):
        """Rows ``[feature..., label]`` as consumed by the logistic model."""
        return np.concatenate([self.features, self.labels[:, None]], axis=1)


class LogisticRegressionModel(Model):
    """Prior ``N(0, I)``; ``log p((f, y) | x) = -log(1 + exp(-y <x, f>))``."""

    family = "blr"

    def __init__(self, d):
        super().__init__(d, d + 1)

    def _split(self, obs):
        o = _batch(obs, self.obs_dim)
        y = o[:, -1]
        if not np.all(np.isin(y, (-1.0, 1.0))):
            raise BadLabelError("labels must be -1 or +1")
        return o[:, :-1], y

    def log_lik(self, obs, x):
        rows, single = _rows(x, self.d)
        f, y = self._split(obs)
        margin = (rows @ f.T) * y[None, :]
        return _out(-np.logaddexp(0.0, -margin).sum(axis=1), single)

    def grad_x_log_lik(self, obs, x):
        rows, single = _rows(x, self.d)
        f, y = self._split(obs)
        margin = (rows @ f.T) * y[None, :]
        w = y[None, :] * 0.5 * (1.0 - np.tanh(0.5 * margin))
        g = w @ f
        return g[0] if single else g

    def predict_proba(self, x, features):
        """Posterior-predictive ``P(y=+1)`` averaged over particles ``x``."""
        rows, _ = _rows(x, self.d)
        z = np.atleast_2d(features) @ rows.T
        return (0.5 * (1.0 + np.tanh(0.5 * z))).mean(axis=1)

    def to_dict(self):
        return {"family": self.family, "d": self.d}


def blr_model(dataset):
    """Logistic-regression model sized from ``dataset``; labels must be +-1."""
    if not np.all(np.isin(dataset.labels, (-1.0, 1.0))):
        raise BadLabelError("labels must be -1 or +1")
    return LogisticRegressionModel(dataset.features.shape[1])


def rotate_features(dataset, psi):
    """Rotate feature coordinates 0 and 1 by ``psi`` radians."""
    f = np.array(dataset.features, dtype=np.float64)
    if f.shape[1] < 2:
        raise DimTooSmallError("rotation needs at least two feature dimensions")
    c, s = math.cos(psi), math.sin(psi)
    f0, f1 = f[:, 0].copy(), f[:, 1].copy()
    f[:, 0] = c * f0 - s * f1
    f[:, 1] = s * f0 + c * f1
    return Dataset(f, dataset.labels)


def pca_project(features, k):
    """Project onto the top-``k`` covariance eigenvectors.

    Returns ``(projected, components, mean)`` with ``components`` of shape
    ``(k, D)``; eigenvector signs are fixed so the largest entry is positive.
    """
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if not 1 <= k <= X.shape[1]:
        raise DimMismatchError(f"cannot keep {k} of {X.shape[1]} components")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / max(X.shape[0] - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:k]
    comps = vecs[:, order].T
    sign = np.sign(comps[np.arange(k), np.abs(comps).argmax(axis=1)])
    comps = comps * sign[:, None]
    return Xc @ comps.T, comps, mean


def synthetic_logistic_dataset(rng, n, d, weight=None):
    """Gaussian features with labels drawn from a logistic model."""
    w = rng.normal(d) if weight is None else np.asarray(weight, dtype=np.float64)
    f = rng.normal((n, d))
    p = 0.5 * (1.0 + np.tanh(0.5 * f @ w))
    y = np.where(rng.uniform(n) < p, 1.0, -1.0)
    return Dataset(f, y), w


class FokkerPlanckFlow1D:
    """Deterministic Fokker-Planck flow for a 1-d conjugate Gaussian update.

    The velocity is ``grad log[pi(x) p(o|x)] - grad log q(x, t)`` with
    ``q(., t) = N(mu(t), var(t))``. It is linear in ``x``, so ``q`` stays
    Gaussian and its moments relax exponentially to the posterior:

        mu(t)  = mu* + (mu0 - mu*) exp(-t / v*)
        var(t) = v*  + (var0 - v*) exp(-2 t / v*)
    """

    def __init__(self, prior, lik, q0=None):
        m0, v0 = float(prior[0]), float(prior[1])
        o, s2 = float(lik[0]), float(lik[1])
        self.post_var = 1.0 / (1.0 / v0 + 1.0 / s2)
        self.post_mean = self.post_var * (m0 / v0 + o / s2)
        self.q0 = (m0, v0) if q0 is None else (float(q0[0]), float(q0[1]))

    def moments(self, t):
        vs, ms = self.post_var, self.post_mean
        mu = ms + (self.q0[0] - ms) * math.exp(-t / vs)
        var = vs + (self.q0[1] - vs) * math.exp(-2.0 * t / vs)
        return mu, var

    def velocity(self, x, t):
        mu, var = self.moments(t)
        return -(x - self.post_mean) / self.post_var + (x - mu) / var

    def divergence(self, t):
        return -1.0 / self.post_var + 1.0 / self.moments(t)[1]

    def __call__(self, x, t):
        return self.velocity(x, t)


def analytic_fp_flow_1d(prior, lik, t, q0=None):
    """Return ``(flow, (mu(t), var(t)))`` for the analytic Fokker-Planck flow."""
    flow = FokkerPlanckFlow1D(prior, lik, q0)
    return flow, flow.moments(t)


def model_from_dict(spec):
    fam = spec.get("family")
    if fam == "gaussian":
        return GaussianModel(spec["prior_mean"], spec["prior_cov"], spec["noise_cov"])
    if fam == "gmm":
        return GaussianMixtureModel(spec.get("truth", (1.0, -2.0)))
    if fam == "lds":
        return LinearDynamicalSystem(spec["A"], spec["B"], spec["Sigma1"], spec["Sigma2"])
    if fam == "blr":
        return LogisticRegressionModel(spec["d"])
    raise DimMismatchError(f"unknown model family {fam!r}")
