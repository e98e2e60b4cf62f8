"""The particle flow Bayes operator, its ELBO loss and two gradient paths.

One Bayes update integrates, for every particle,

    dx/dt = f(X_m, o, x, t),        d log q / dt = -div_x f

with the context ``(X_m, o)`` frozen at the stage-initial ensemble. The loss
of a task with ``M`` stages and ``N`` particles is

    L = 1/(M N) sum_m sum_n [log q_m(x_m^n) - log p(x_m^n, O_m)].

``grad_backprop`` differentiates the unrolled fixed-step solver exactly.
``grad_adjoint`` integrates the adjoint ODEs backwards per particle and, like
the printed algorithm, ignores gradient flow through the shared context; the
matching oracle is ``grad_backprop(..., detach=True)``.

Hidden-Markov models (the LDS) alternate a transition ``x -> A x + eps`` with
each Bayes update. The density of the transitioned ensemble is not available
in closed form, so it is replaced by a KDE over the transitioned particles,
both as the stage's starting ``log q`` and in the stage's surrogate target
``log KDE(x) + log p(o_m | x)``.
"""
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimMismatchError, EmptyBatchError, EmptyEnsembleError, NonFiniteError, PFBRError
from .flownet import FlowField, _check_batch, const_vars
from .ode import IntegratorConfig, solve_ivp
from .rng import as_rng
from .tasks import _scott_grad, kde_grads, kde_log_density, scott_bandwidth


@dataclass
class ParticleEnsemble:
    """Equally weighted particles with their log-densities."""

    positions: np.ndarray
    logdens: np.ndarray
    stage: int = 0

    def __post_init__(self):
        x = np.asarray(self.positions, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        lq = np.asarray(self.logdens, dtype=np.float64).reshape(-1)
        if x.shape[0] == 0:
            raise EmptyEnsembleError("ensemble has no particles")
        if lq.size != x.shape[0]:
            raise DimMismatchError(f"{x.shape[0]} positions but {lq.size} log-densities")
        if not (np.isfinite(x).all() and np.isfinite(lq).all()):
            raise NonFiniteError("ensemble holds non-finite values")
        if self.stage < 0:
            raise DimMismatchError("stage must be non-negative")
        self.positions, self.logdens = x, lq

    @property
    def N(self):
        return self.positions.shape[0]

    @property
    def d(self):
        return self.positions.shape[1]

    def permuted(self, perm):
        return ParticleEnsemble(self.positions[perm], self.logdens[perm], self.stage)

    def to_dict(self):
        return {"stage": self.stage, "positions": self.positions.tolist(),
                "logdens": self.logdens.tolist()}

    @classmethod
    def from_dict(cls, spec):
        return cls(spec["positions"], spec["logdens"], spec.get("stage", 0))


def initial_ensemble(prior, rng, n):
    """``n`` prior draws with ``logdens = log prior(x)``."""
    x = prior.sample(as_rng(rng), n)
    return ParticleEnsemble(x, prior.log_density(x), 0)


def draw_noise(model, rng, n, M):
    """Pre-drawn transition noise for hidden-Markov models (``None`` otherwise)."""
    if not model.hidden_markov:
        return None
    rng = as_rng(rng)
    return [model.transition_noise(rng, n) for _ in range(M)]


def _annotate(err, **where):
    for k, v in where.items():
        if getattr(err, k, None) is None:
            setattr(err, k, v)
    tag = ", ".join(f"{k} {v}" for k, v in where.items())
    err.args = (f"{tag}: {err.args[0] if err.args else err}",) + tuple(err.args[1:])
    return err


# ------------------------------------------------------------------ forward

def _numpy_rhs(field):
    def rhs(s, t):
        f, div = field(ad.const(s[0]), t)
        return f.value, -div.value[:, 0]
    return rhs


def _locate(field, x, logq, cfg):
    """Index of the first particle whose trajectory blows up (or ``None``)."""
    rhs = _numpy_rhs(field)
    for n in range(x.shape[0]):
        try:
            solve_ivp(rhs, (x[n:n + 1], logq[n:n + 1]), cfg)
        except NonFiniteError:
            return n
    return None


def apply_operator(ensemble, obs_batch, params, cfg=None, field=None, divergence="exact",
                   probes=None):
    """One Bayes update: transport particles and their log-densities.

    Parameters
    ----------
    ensemble : ParticleEnsemble
    obs_batch : array
        ``(L, obs_dim)`` observations for this update.
    params : FlowParams
    cfg : IntegratorConfig, optional
    field : callable, optional
        Replaces the network; ``field(x_var, t) -> (f, div)``.

    Raises
    ------
    NonFiniteError
        With ``step`` and ``particle`` attributes when they can be determined.
    """
    cfg = cfg or IntegratorConfig()
    if field is None:
        if ensemble.d != params.dims.d:
            raise DimMismatchError(f"ensemble dim {ensemble.d} != flow dim {params.dims.d}")
        field = FlowField(params, positions=ensemble.positions, obs_batch=obs_batch,
                          divergence=divergence, probes=probes)
    elif np.asarray(obs_batch).size == 0:
        raise EmptyBatchError("empty observation batch")
    x0, lq0 = ensemble.positions, ensemble.logdens
    try:
        x, lq = solve_ivp(_numpy_rhs(field), (x0, lq0), cfg)
    except NonFiniteError as err:
        raise _annotate(err, particle=_locate(field, x0, lq0, cfg)) from None
    return ParticleEnsemble(x, lq, ensemble.stage + 1)


def _transition(model, ensemble, noise):
    x = model.lds_transition(ensemble.positions, noise=noise)
    return ParticleEnsemble(x, kde_log_density(x, scott_bandwidth(x), x), ensemble.stage)


def sequential_inference(prior_samples, model, observations, params, cfg=None, rng=None,
                         noise=None, divergence="exact", probes=None):
    """Apply the operator once per batch; returns ``[X_1, ..., X_M]``.

    For hidden-Markov models each update is preceded by the transition, using
    ``noise[m]`` when given and fresh draws from ``rng`` otherwise.
    """
    ens, out = prior_samples, []
    for m, batch in enumerate(observations):
        try:
            if model.hidden_markov:
                eps = noise[m] if noise is not None else model.transition_noise(as_rng(rng), ens.N)
                ens = _transition(model, ens, eps)
            ens = apply_operator(ens, batch, params, cfg, divergence=divergence, probes=probes)
        except PFBRError as err:
            raise _annotate(err, stage=m + 1) from None
        out.append(ens)
    return out


class _StaticTarget:
    """``log p(x, O_m) = log prior(x) + sum_{t<=m} log p(o_t | x)``, cached."""

    def __init__(self, task):
        self.prior = task.prior
        self.acc = task.model.accumulator()

    def advance(self, batch, _centers=None):
        self.acc.add(batch)

    def value_grad(self, x):
        v = self.prior.log_density(x) + self.acc.log_lik(x)
        g = self.prior.grad_log_density(x) + self.acc.grad(x)
        return np.asarray(v).reshape(-1), np.asarray(g).reshape(x.shape)


class _MarkovTarget:
    """Per-stage surrogate ``log KDE(x; X~_m) + log p(o_m | x)``."""

    def __init__(self, task):
        self.model = task.model

    def advance(self, batch, centers):
        self.batch, self.centers = batch, centers
        self.sigma = scott_bandwidth(centers)

    def value_grad(self, x):
        kv, kg, _, _ = kde_grads(self.centers, self.sigma, x)
        v = kv + self.model.log_lik(self.batch, x)
        g = kg + self.model.grad_x_log_lik(self.batch, x)
        return v, g


def _target(task):
    return _MarkovTarget(task) if task.model.hidden_markov else _StaticTarget(task)


def _setup(task, rng, n_particles, ensemble, noise):
    if ensemble is None:
        if n_particles is None:
            raise EmptyEnsembleError("pass an ensemble or a particle count")
        rng = as_rng(rng)
        ensemble = initial_ensemble(task.prior, rng, n_particles)
    if noise is None and task.model.hidden_markov:
        noise = draw_noise(task.model, rng, ensemble.N, task.M)
    return ensemble, noise


def task_loss(task, params, cfg=None, rng=None, n_particles=None, ensemble=None, noise=None,
              divergence="exact", probes=None):
    """Normalised negative ELBO and the stage ensembles ``[X_1..X_M]``."""
    cfg = cfg or IntegratorConfig()
    ensemble, noise = _setup(task, rng, n_particles, ensemble, noise)
    ensembles = sequential_inference(ensemble, task.model, task.observations, params, cfg,
                                     noise=noise, divergence=divergence, probes=probes)
    target = _target(task)
    M, N = task.M, ensemble.N
    prev = ensemble
    total = 0.0
    for m, (batch, ens) in enumerate(zip(task.observations, ensembles)):
        centers = None
        if task.model.hidden_markov:
            centers = task.model.lds_transition(prev.positions, noise=noise[m])
        target.advance(batch, centers)
        v, _ = target.value_grad(ens.positions)
        total += float(np.sum(ens.logdens - v))
        prev = ens
    loss = total / (M * N)
    if not np.isfinite(loss):
        raise NonFiniteError("task loss is not finite")
    return loss, ensembles


# ------------------------------------------------------------------ backprop

def _traced_static(x, target):
    v, g = target.value_grad(x.value)
    return ad.external(v.reshape(-1, 1), (x,), lambda gr: (gr * g,), "log_target")


def _traced_kde(centers, x, detach):
    """``log KDE(x_i; centers)`` per row with a Scott bandwidth from ``centers``."""
    c = centers.value
    sigma = scott_bandwidth(c)
    val, gx, wrt_c, gs = kde_grads(c, sigma, x.value)
    dsig = _scott_grad(c)

    def vjp(gr):
        w = gr[:, 0]
        gc = None
        if not detach:
            gc = wrt_c(w) + float(w @ gs) * dsig
        return gc, w[:, None] * gx
    parent_c = ad.stop_gradient(centers) if detach else centers
    return ad.external(val.reshape(-1, 1), (parent_c, x), vjp, "kde")


def _traced_forward(task, params, pv, cfg, ensemble, noise, detach, divergence="exact"):
    """Unrolled traced solve; returns the scalar loss Var."""
    model = task.model
    M, N = task.M, ensemble.N
    x = ad.const(ensemble.positions)
    lq = ad.const(ensemble.logdens.reshape(-1, 1))
    target = None if model.hidden_markov else _target(task)
    loss = None
    for m, batch in enumerate(task.observations):
        if model.hidden_markov:
            x = ad.add(ad.matmul(x, ad.const(model.A.T)), ad.const(noise[m]))
            centers = x
            lq = _traced_kde(centers, x, detach)
        positions = ad.stop_gradient(x) if detach else x
        field = FlowField(params, pv, positions=positions, obs_batch=_check_batch(batch, model.obs_dim),
                          divergence=divergence)
        # fresh node so tangents never see the context's dependence on x
        x = ad.scale(x, 1.0)

        def rhs(s, t, field=field):
            f, div = field(s[0], t)
            return f, ad.scale(div, -1.0)
        try:
            x, lq = solve_ivp(rhs, (x, lq), cfg)
        except NonFiniteError as err:
            raise _annotate(err, stage=m + 1) from None
        if model.hidden_markov:
            stage_target = ad.add(_traced_kde(centers, x, detach), ad.external(
                model.log_lik(batch, x.value).reshape(-1, 1), (x,),
                (lambda g_, gl=model.grad_x_log_lik(batch, x.value): (g_ * gl,)), "log_lik"))
        else:
            target.advance(batch)
            stage_target = _traced_static(x, target)
        term = ad.scale(ad.sum(ad.add(lq, ad.scale(stage_target, -1.0))), 1.0 / (M * N))
        loss = term if loss is None else ad.add(loss, term)
    return loss


def grad_backprop(task, params, cfg=None, rng=None, n_particles=None, ensemble=None, noise=None,
                  detach=False, divergence="exact"):
    """Exact gradient of the discretised loss by reverse mode through the solver.

    ``detach=True`` stops gradients through every cross-particle path (the
    context embedding and KDE centres), giving the adjoint's matching oracle.

    Returns
    -------
    (float, ParamVector)
    """
    cfg = cfg or IntegratorConfig()
    if task.M == 0:
        return 0.0, params.vector.zeros_like()
    ensemble, noise = _setup(task, rng, n_particles, ensemble, noise)
    pv = ad.param_vars(params.vector)
    loss = _traced_forward(task, params, pv, cfg, ensemble, noise, detach, divergence)
    names = params.vector.names
    grads = ad.backward([loss], [np.ones((1, 1))], [pv[n] for n in names])
    return float(loss.value[0, 0]), ad.collect_grads(params.vector, pv, dict(zip(names, grads)))


def loss_at(task, params, cfg, ensemble, noise=None, detach=False):
    """Loss of the traced forward pass (same arithmetic as ``grad_backprop``)."""
    pv = const_vars(params)
    return float(_traced_forward(task, params, pv, cfg or IntegratorConfig(), ensemble, noise,
                                 detach).value[0, 0])


# ------------------------------------------------------------------ adjoint

def _adjoint_rhs(params, positions, batch):
    names = params.vector.names

    def rhs(s, t):
        x, px, py, _ = s
        pv = ad.param_vars(params.vector)
        field = FlowField(params, pv, positions=positions, obs_batch=batch)
        xv = ad.leaf(x)
        f, div = field(xv, t)
        S = ad.add(ad.sum(ad.mul(f, ad.const(px))), ad.sum(ad.mul(div, ad.const(py[:, None]))))
        grads = ad.backward([S], [np.ones((1, 1))], [xv] + [pv[n] for n in names])
        gz = np.concatenate([g.reshape(-1) for g in grads[1:]])
        return f.value, -grads[0], np.zeros_like(py), -gz
    return rhs


def grad_adjoint(task, params, cfg=None, rng=None, n_particles=None, ensemble=None, noise=None):
    """Gradient by the continuous adjoint method.

    The forward pass keeps only stage-boundary states. The backward sweep
    runs ``m = M..1``: it injects ``dL/d[x, y]`` for stage ``m`` into the
    adjoint ``p = (p_x, p_y)`` (with ``y = -log q``), then integrates

        dx/dt   = f
        dp_x/dt = -[(df/dx)^T p_x + d(div f)/dx p_y],   dp_y/dt = 0
        dz/dt   = -[(df/dtheta)^T p_x + d(div f)/dtheta p_y]

    from ``t = T`` to ``0`` with the same fixed-step method. Both vector
    Jacobian products come from one reverse pass over
    ``S = sum_n p_x . f + p_y div f`` (reverse over the traced divergence).
    The context is treated as a constant input of each particle's flow.
    """
    cfg = cfg or IntegratorConfig()
    if task.M == 0:
        return 0.0, params.vector.zeros_like()
    ensemble, noise = _setup(task, rng, n_particles, ensemble, noise)
    model = task.model
    M, N = task.M, ensemble.N

    # forward: boundary states only
    starts, ends, centers_list = [], [], []
    ens = ensemble
    target = _target(task)
    total = 0.0
    for m, batch in enumerate(task.observations):
        centers = None
        if model.hidden_markov:
            ens = _transition(model, ens, noise[m])
            centers = ens.positions
        starts.append(ens)
        try:
            ens = apply_operator(ens, batch, params, cfg)
        except PFBRError as err:
            raise _annotate(err, stage=m + 1) from None
        ends.append(ens)
        centers_list.append(centers)
        target.advance(batch, centers)
        v, _ = target.value_grad(ens.positions)
        total += float(np.sum(ens.logdens - v))
    loss = total / (M * N)

    # backward sweep; targets are recomputed stage by stage
    targets = []
    target = _target(task)
    for batch, centers in zip(task.observations, centers_list):
        target.advance(batch, centers)
        targets.append(target.value_grad(ends[len(targets)].positions)[1])

    px = np.zeros((N, ensemble.d))
    py = np.zeros(N)
    z = np.zeros(params.size)
    back = cfg.reversed()
    scale = 1.0 / (M * N)
    for m in range(M - 1, -1, -1):
        px = px - scale * targets[m]
        py = py - scale
        rhs = _adjoint_rhs(params, starts[m].positions, _check_batch(task.observations[m],
                                                                     model.obs_dim))
        try:
            x0, px, py, z = solve_ivp(rhs, (ends[m].positions, px, py, z), back)
        except NonFiniteError as err:
            raise _annotate(err, stage=m + 1) from None
        if model.hidden_markov:
            xt = starts[m].positions
            _, gk, _, _ = kde_grads(xt, scott_bandwidth(xt), xt)
            # y at the stage start is -log KDE(x~), with x~ = A x_prev + eps
            px = (px - py[:, None] * gk) @ model.A
            py = np.zeros(N)
    return loss, params.vector.with_values(z)
