"""Reference samplers: one-pass SMC and stochastic gradient Langevin dynamics."""
import math

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, DegenerateWeightsError, DimMismatchError, NonFiniteError
from .rng import as_rng


class WeightedEnsemble:
    """Particles with log importance weights."""

    def __init__(self, positions, logw=None):
        x = np.asarray(positions, dtype=np.float64)
        self.positions = x.reshape(-1, 1) if x.ndim == 1 else x
        n = self.positions.shape[0]
        self.logw = np.full(n, -math.log(n)) if logw is None else \
            np.asarray(logw, dtype=np.float64).reshape(-1)
        if self.logw.size != n:
            raise DimMismatchError("one log-weight per particle is required")

    @property
    def N(self):
        return self.positions.shape[0]

    def weights(self):
        """Normalised weights summing to one."""
        lse = logsumexp(self.logw)
        if not np.isfinite(lse):
            raise DegenerateWeightsError("all importance weights are zero")
        w = np.exp(self.logw - lse)
        return w / w.sum()

    def normalized(self):
        return WeightedEnsemble(self.positions, self.logw - logsumexp(self.logw))

    def ess(self):
        w = self.weights()
        return 1.0 / float(np.sum(w * w))

    def mean(self):
        return self.weights() @ self.positions

    def cov(self):
        w = self.weights()
        c = self.positions - w @ self.positions
        return (c * w[:, None]).T @ c

    def resample(self, rng):
        return systematic_resample(self, rng)


def systematic_indices(weights, u):
    """Offspring indices for one uniform ``u`` in ``[0, 1)``."""
    n = weights.size
    # cumulate expected offspring counts so equal weights stay exact integers
    cdf = np.cumsum(weights * n)
    cdf[-1] = n
    return np.searchsorted(cdf, u + np.arange(n), side="right")


def systematic_resample(we, rng):
    """Systematic resampling to ``N`` equally weighted offspring."""
    w = we.weights()
    idx = systematic_indices(w, as_rng(rng).uniform())
    return WeightedEnsemble(we.positions[idx].copy())


def smc_step(we, obs_batch, model, rng, ess_threshold=0.5):
    """Reweight by the batch likelihood and resample when ESS drops.

    Hidden-Markov models first move every particle through the transition
    (a bootstrap filter).
    """
    if not 0.0 < ess_threshold <= 1.0:
        raise ConfigError("ess_threshold must lie in (0, 1]")
    rng = as_rng(rng)
    x = we.positions
    if model.hidden_markov:
        x = model.lds_transition(x, rng)
    logw = we.logw + model.log_lik(obs_batch, x)
    if np.all(np.isneginf(logw)) or np.any(np.isnan(logw)):
        raise DegenerateWeightsError("all importance weights vanished")
    out = WeightedEnsemble(x, logw).normalized()
    if out.ess() < ess_threshold * out.N:
        out = systematic_resample(out, rng)
    return out


def smc_filter(model, observations, rng, n, prior=None, ess_threshold=0.5):
    """Run SMC over all batches; returns one WeightedEnsemble per stage."""
    rng = as_rng(rng)
    prior = model.prior if prior is None else prior
    we = WeightedEnsemble(prior.sample(rng, n))
    out = []
    for batch in observations:
        we = smc_step(we, batch, model, rng, ess_threshold)
        out.append(we)
    return out


def sgld_run(model, observations, x0, step, steps, rng, prior=None, batch_size=None):
    """Langevin chains ``x += eps grad log[prior * lik] + sqrt(2 eps) xi``.

    Parameters
    ----------
    observations : list of batches or array
        Everything observed so far; gradients use the full set unless
        ``batch_size`` is given, in which case a rescaled random subset is
        used at every step.
    x0 : (d,) or (C, d) array
        One starting point per chain.

    Returns
    -------
    array of shape ``(steps + 1,) + x0.shape``
    """
    if not step > 0:
        raise ConfigError("SGLD step size must be positive")
    rng = as_rng(rng)
    prior = model.prior if prior is None else prior
    x0 = np.asarray(x0, dtype=np.float64)
    x = x0.reshape(-1, model.d).copy()
    if isinstance(observations, (list, tuple)):
        obs = np.concatenate([np.asarray(b, dtype=np.float64).reshape(-1, model.obs_dim)
                              for b in observations]) if observations else \
            np.zeros((0, model.obs_dim))
    else:
        obs = np.asarray(observations, dtype=np.float64).reshape(-1, model.obs_dim)
    full = None
    if batch_size is None and obs.shape[0]:
        full = model.accumulator()
        full.add(obs)
    traj = np.empty((steps + 1,) + x.shape)
    traj[0] = x
    noise_scale = math.sqrt(2.0 * step)
    for k in range(steps):
        g = prior.grad_log_density(x)
        if full is not None:
            g = g + full.grad(x)
        elif obs.shape[0]:
            idx = rng.integers(obs.shape[0], batch_size)
            g = g + model.grad_x_log_lik(obs[idx], x) * (obs.shape[0] / batch_size)
        x = x + step * g + noise_scale * rng.normal(x.shape)
        if not np.isfinite(x).all():
            raise NonFiniteError(f"SGLD diverged at step {k}")
        traj[k + 1] = x
    return traj.reshape((steps + 1,) + x0.shape)


def sgld_stagewise(task, rng, n_chains, step, steps):
    """Final states of ``n_chains`` chains run on ``O_m`` for every stage ``m``.

    Each stage restarts from the previous stage's chain states, which keeps
    the method sequential. Only static models are supported.
    """
    if task.model.hidden_markov:
        raise ConfigError("SGLD baseline supports static models only")
    rng = as_rng(rng)
    x = task.prior.sample(rng, n_chains)
    out = []
    for m in range(1, task.M + 1):
        traj = sgld_run(task.model, task.observations[:m], x, step, steps, rng, prior=task.prior)
        x = traj[-1]
        out.append(x.copy())
    return out
