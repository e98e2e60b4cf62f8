"""Inference tasks for meta-training: priors, KDE, segmentation and generation.

A task is ``(prior, model, observation batches)``. The prior is either an
analytic Gaussian or a kernel density estimate over a particle set, which is
how a posterior from an earlier inference run becomes a new prior.
"""
import math
from dataclasses import dataclass, asdict, fields

import numpy as np
from scipy.special import logsumexp, softmax

from . import models as mdl
from .errors import BadSplitIndexError, ConfigError, DimMismatchError, EmptyBatchError
from .rng import Rng, as_rng

_CHUNK = 1024


# ------------------------------------------------------------------ KDE

def scott_bandwidth(particles):
    """``N^(-1/(d+4))`` times the mean marginal standard deviation.

    Degenerate sets (a single particle, or all particles equal) fall back to
    unit spread so that the bandwidth stays strictly positive.
    """
    x = np.atleast_2d(np.asarray(particles, dtype=np.float64))
    n, d = x.shape
    spread = float(x.std(axis=0, ddof=1).mean()) if n > 1 else 1.0
    if not spread > 0:
        spread = 1.0
    return n ** (-1.0 / (d + 4)) * spread


def _scott_grad(particles):
    """d(bandwidth)/d(particles), zero where the fallback applies."""
    x = np.atleast_2d(particles)
    n, d = x.shape
    if n < 2:
        return np.zeros_like(x)
    std = x.std(axis=0, ddof=1)
    if not std.mean() > 0:
        return np.zeros_like(x)
    safe = np.where(std > 0, std, 1.0)
    g = (x - x.mean(axis=0)) / ((n - 1) * safe)
    g[:, std == 0] = 0.0
    return n ** (-1.0 / (d + 4)) * g / d


def _sqdist(x, c):
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)


def kde_log_density(particles, sigma, x):
    """Log of a Gaussian KDE with bandwidth ``sigma`` at ``x``.

    Parameters
    ----------
    particles : (N, d) array
    sigma : float
    x : (d,) or (n, d) array

    Returns
    -------
    float or (n,) array
    """
    c = np.atleast_2d(np.asarray(particles, dtype=np.float64))
    n, d = c.shape
    if n == 0:
        raise EmptyBatchError("KDE needs at least one particle")
    if not sigma > 0:
        raise ConfigError("KDE bandwidth must be positive")
    q = np.asarray(x, dtype=np.float64)
    single = q.ndim == 1
    q = q.reshape(-1, d)
    const = -0.5 * d * math.log(2.0 * math.pi) - d * math.log(sigma) - math.log(n)
    out = np.empty(q.shape[0])
    for s in range(0, q.shape[0], _CHUNK):
        blk = q[s:s + _CHUNK]
        out[s:s + _CHUNK] = logsumexp(-_sqdist(blk, c) / (2.0 * sigma * sigma), axis=1)
    out += const
    return float(out[0]) if single else out


def kde_grads(particles, sigma, x):
    """Gradients of ``sum_i log kde(x_i)``-style terms.

    Returns ``(value, d/dx, d/dparticles as (n, N, d) reducer, d/dsigma)``
    packed as ``value (n,)``, ``gx (n, d)``, a callable mapping row weights
    ``w (n,)`` to the ``(N, d)`` particle gradient, and ``gs (n,)``.
    """
    c = np.atleast_2d(particles)
    n_c, d = c.shape
    q = np.atleast_2d(x)
    d2 = _sqdist(q, c)
    logits = -d2 / (2.0 * sigma * sigma)
    value = logsumexp(logits, axis=1) - 0.5 * d * math.log(2 * math.pi) \
        - d * math.log(sigma) - math.log(n_c)
    w = softmax(logits, axis=1)
    gx = -(q - w @ c) / sigma ** 2
    gs = (w * d2).sum(axis=1) / sigma ** 3 - d / sigma

    def wrt_particles(rw):
        wr = w * rw[:, None]
        return (wr.T @ q - wr.sum(axis=0)[:, None] * c) / sigma ** 2
    return value, gx, wrt_particles, gs


def kde_sample(particles, sigma, rng, n):
    """Pick particles uniformly and add ``N(0, sigma^2 I)`` noise."""
    c = np.atleast_2d(np.asarray(particles, dtype=np.float64))
    rng = as_rng(rng)
    idx = rng.integers(c.shape[0], n)
    return c[idx] + sigma * rng.normal((n, c.shape[1]))


# ------------------------------------------------------------------ priors

class GaussianPrior:
    kind = "gaussian"

    def __init__(self, posterior):
        self.gaussian = posterior
        self.d = posterior.d

    @classmethod
    def standard(cls, d):
        return cls(mdl.GaussianPosterior(np.zeros(d), np.eye(d)))

    def log_density(self, x):
        return self.gaussian.log_density(x)

    def grad_log_density(self, x):
        return self.gaussian.grad_log_density(x)

    def sample(self, rng, n):
        return self.gaussian.sample(as_rng(rng), n)

    def mean(self):
        return self.gaussian.mean.copy()

    def to_dict(self):
        return {"kind": "gaussian", "mean": self.gaussian.mean.tolist(),
                "cov": self.gaussian.cov.tolist()}


class KDEPrior:
    """Empirical prior ``(1/N) sum_n N(x; x^n, sigma^2 I)``."""

    kind = "kde"

    def __init__(self, particles, bandwidth=None):
        self.particles = np.atleast_2d(np.asarray(particles, dtype=np.float64)).copy()
        if self.particles.shape[0] == 0:
            raise EmptyBatchError("KDE prior needs particles")
        self.d = self.particles.shape[1]
        self.bandwidth = scott_bandwidth(self.particles) if bandwidth is None else float(bandwidth)
        if not self.bandwidth > 0:
            raise ConfigError("KDE bandwidth must be positive")

    def log_density(self, x):
        return kde_log_density(self.particles, self.bandwidth, x)

    def grad_log_density(self, x):
        q = np.asarray(x, dtype=np.float64)
        _, gx, _, _ = kde_grads(self.particles, self.bandwidth, q.reshape(-1, self.d))
        return gx[0] if q.ndim == 1 else gx

    def sample(self, rng, n):
        return kde_sample(self.particles, self.bandwidth, rng, n)

    def mean(self):
        return self.particles.mean(axis=0)

    def to_dict(self):
        return {"kind": "kde", "particles": self.particles.tolist(), "bandwidth": self.bandwidth}


def prior_from_dict(spec):
    if spec["kind"] == "gaussian":
        return GaussianPrior(mdl.GaussianPosterior(spec["mean"], spec["cov"]))
    if spec["kind"] == "kde":
        return KDEPrior(spec["particles"], spec["bandwidth"])
    raise ConfigError(f"unknown prior kind {spec['kind']!r}")


# ------------------------------------------------------------------ tasks

def _as_batch(b, k):
    a = np.asarray(b, dtype=np.float64)
    if a.ndim <= 1:
        a = a.reshape(-1, k) if a.size % k == 0 and a.size > 0 else a.reshape(1, -1)
    if a.shape[0] == 0:
        raise EmptyBatchError("observation batches must be non-empty")
    if a.shape[1] != k:
        raise DimMismatchError(f"observation dim {a.shape[1]} does not match model obs_dim {k}")
    return a


class InferenceTask:
    """Prior, model and ``M`` observation batches."""

    def __init__(self, prior, model, observations, truth=None, offset=0):
        if prior.d != model.d:
            raise DimMismatchError(f"prior dim {prior.d} != model dim {model.d}")
        self.prior = prior
        self.model = model
        self.observations = [_as_batch(b, model.obs_dim) for b in observations]
        self.truth = None if truth is None else np.asarray(truth, dtype=np.float64)
        self.offset = int(offset)

    @property
    def M(self):
        return len(self.observations)

    @property
    def d(self):
        return self.model.d

    def validate(self):
        if self.M < 1:
            raise ConfigError("a task needs at least one observation batch")
        return True

    def oracle(self):
        """Exact posteriors per stage (needs a Gaussian prior and an oracle model)."""
        if not isinstance(self.prior, GaussianPrior) or not self.model.has_oracle:
            raise mdl.NoOracleError("no exact posterior for this task")
        return self.model.posterior(self.observations, prior=self.prior.gaussian)

    def with_observations(self, observations, prior=None, offset=None):
        return InferenceTask(self.prior if prior is None else prior, self.model, observations,
                             self.truth, self.offset if offset is None else offset)

    def to_dict(self):
        out = {"family": self.model.family, "model": self.model.to_dict(),
               "prior": self.prior.to_dict(),
               "observations": [b.tolist() for b in self.observations]}
        if self.truth is not None:
            out["truth"] = self.truth.tolist()
        if self.offset:
            out["offset"] = self.offset
        return out

    @classmethod
    def from_dict(cls, spec):
        model = mdl.model_from_dict(spec["model"])
        return cls(prior_from_dict(spec["prior"]), model, spec["observations"],
                   spec.get("truth"), spec.get("offset", 0))


def segment_sequence(task, ensembles, m_star):
    """Split ``task`` after stage ``m_star``.

    The tail's prior is a KDE over the stage-``m_star`` ensemble, standing in
    for the intractable intermediate posterior.
    """
    if not 1 <= m_star < task.M:
        raise BadSplitIndexError(f"split index {m_star} outside [1, {task.M - 1}]")
    chosen = None
    for e in ensembles:
        if getattr(e, "stage", None) == m_star:
            chosen = e
    if chosen is None:
        if len(ensembles) < m_star:
            raise BadSplitIndexError(f"no ensemble for stage {m_star}")
        chosen = ensembles[m_star - 1]
    positions = getattr(chosen, "positions", chosen)
    head = task.with_observations(task.observations[:m_star])
    tail = task.with_observations(task.observations[m_star:], prior=KDEPrior(positions),
                                  offset=task.offset + m_star)
    return head, tail


def make_batches(observations, L):
    """Consecutive chunks of ``L`` observations; the last may be shorter."""
    if L < 1:
        raise ConfigError("batch size L must be >= 1")
    obs = np.asarray(observations, dtype=np.float64)
    if obs.ndim == 1:
        obs = obs.reshape(-1, 1)
    return [obs[i:i + L] for i in range(0, obs.shape[0], L)]


# ------------------------------------------------------------------ generation

FAMILIES = ("gaussian", "gmm", "lds", "blr")


@dataclass(frozen=True)
class FamilyConfig:
    """Task-family settings; defaults are our own choices.

    ``history`` caps the number of synthetic observations absorbed before a
    task starts; the resulting posterior (exact when available, otherwise a
    KDE over SMC particles) becomes that task's prior. ``truth`` pins the
    ground truth of every task instead of drawing it from the model prior.
    """

    family: str = "gaussian"
    n_tasks: int = 100
    M: int = 10
    L: int = 1
    N: int = 128
    d: int = 1
    noise_scale: float = 3.0
    history: int = 10
    kde_fraction: float = 0.5
    smc_particles: int = 1024
    bandwidth: object = "scott"
    lds_noise: float = 0.1
    model_seed: int = 0
    truth: list = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"family: unknown model family {self.family!r}")
        for name in ("M", "L", "N", "d", "smc_particles"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if self.n_tasks < 0 or self.history < 0:
            raise ConfigError("n_tasks and history must be non-negative")
        if not 0.0 <= self.kde_fraction <= 1.0:
            raise ConfigError("kde_fraction: must lie in [0, 1]")
        if self.noise_scale <= 0 or self.lds_noise <= 0:
            raise ConfigError("noise scales must be positive")
        if self.bandwidth != "scott" and not (isinstance(self.bandwidth, (int, float))
                                             and self.bandwidth > 0):
            raise ConfigError("bandwidth: must be 'scott' or a positive number")
        if self.family == "gmm" and self.d != 2:
            raise ConfigError("d: the mixture family is two-dimensional")
        if self.truth is not None:
            t = np.asarray(self.truth, dtype=np.float64).reshape(-1)
            if not np.all(np.isfinite(t)):
                raise ConfigError("truth: must be finite")
            object.__setattr__(self, "truth", t.tolist())

    @classmethod
    def from_dict(cls, spec):
        known = {f.name for f in fields(cls)}
        bad = sorted(set(spec) - known)
        if bad:
            raise ConfigError(f"unknown task-family keys: {', '.join(bad)}")
        return cls(**spec)

    def to_dict(self):
        return asdict(self)


def family_model(cfg):
    """The model shared by every task of a family (LDS matrices drawn once)."""
    if cfg.family == "gaussian":
        return mdl.mvn_model(cfg.d, cfg.noise_scale)
    if cfg.family == "gmm":
        return mdl.gmm_model()
    if cfg.family == "lds":
        return mdl.random_lds(Rng(cfg.model_seed), cfg.d, noise=cfg.lds_noise)
    return mdl.LogisticRegressionModel(cfg.d)


def _simulate(model, rng, truth, count):
    """``count`` observations; for the LDS ``truth`` is the current state."""
    if model.family == "lds":
        x = np.asarray(truth, dtype=np.float64)
        obs = []
        L2 = np.linalg.cholesky(model.Sigma2)
        for _ in range(count):
            x = model.A @ x + model.chol1 @ rng.normal(model.d)
            obs.append(model.B @ x + L2 @ rng.normal(model.obs_dim))
        return np.array(obs).reshape(count, model.obs_dim), x
    if model.family == "blr":
        f = rng.normal((count, model.d))
        p = 0.5 * (1.0 + np.tanh(0.5 * f @ truth))
        y = np.where(rng.uniform(count) < p, 1.0, -1.0)
        return np.concatenate([f, y[:, None]], axis=1), truth
    return model.sample_observations(rng, truth, count).reshape(count, model.obs_dim), truth


def _history_prior(model, cfg, rng, history_obs, use_kde):
    from .baselines import smc_filter

    batches = [history_obs[i:i + 1] for i in range(history_obs.shape[0])]
    if model.has_oracle and not use_kde:
        return GaussianPrior(model.posterior(batches)[-1])
    we = smc_filter(model, batches, rng, cfg.smc_particles)[-1]
    particles = we.resample(rng).positions[:cfg.N]
    bw = None if cfg.bandwidth == "scott" else float(cfg.bandwidth)
    return KDEPrior(particles, bw)


def generate_training_set(cfg, rng):
    """Emit ``cfg.n_tasks`` tasks with diverse, data-driven priors.

    For each task a ground truth is drawn from the model prior (or fixed by
    ``cfg.truth``) and
    ``m0 ~ U{0..history}`` observations are absorbed first. ``m0 = 0`` keeps
    the model prior; otherwise the prior is the resulting posterior, either
    analytic or a KDE over SMC particles (chosen with ``kde_fraction``). The
    task's own ``M * L`` observations continue from the same truth.
    """
    if isinstance(cfg, dict):
        cfg = FamilyConfig.from_dict(cfg)
    rng = as_rng(rng)
    model = family_model(cfg)
    fixed = None
    if cfg.truth is not None:
        fixed = np.asarray(cfg.truth, dtype=np.float64)
        if fixed.size != model.d:
            raise ConfigError(f"truth: expected {model.d} values, got {fixed.size}")
    tasks = []
    for _ in range(cfg.n_tasks):
        truth = model.sample_prior(rng, 1)[0] if cfg.truth is None else fixed
        m0 = rng.integers(cfg.history + 1) if cfg.history > 0 else 0
        use_kde = rng.uniform() < cfg.kde_fraction
        if m0 > 0:
            hist, state = _simulate(model, rng, truth, m0)
            prior = _history_prior(model, cfg, rng, hist, use_kde)
        else:
            prior, state = GaussianPrior(model.prior), truth
        obs, _ = _simulate(model, rng, state, cfg.M * cfg.L)
        task = InferenceTask(prior, model, make_batches(obs, cfg.L), truth=truth)
        task.validate()
        tasks.append(task)
    return tasks


def held_out_task(model, rng, M, L=1, truth=None):
    """A held-out task from the model prior with ``M`` batches of size ``L``."""
    rng = as_rng(rng)
    truth = model.sample_prior(rng, 1)[0] if truth is None else np.asarray(truth, dtype=np.float64)
    obs, _ = _simulate(model, rng, truth, M * L)
    return InferenceTask(GaussianPrior(model.prior), model, make_batches(obs, L), truth=truth)
