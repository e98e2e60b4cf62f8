"""Context-conditioned flow velocity and its divergence.

The velocity is a stack of time-gated layers

    Gated_j(y, t) = (W_j [ctx, y] + b_j) * sigmoid(t v_j + c_j) + t c_j

fed with ``ctx = [mean_n phi(x_m^n), mean_l g(o^l)]``. ``W_j`` is stored as
three blocks acting on the particle embedding, the observation embedding and
the layer input. Hidden gated layers go through ``tanh`` by default
(``activation="none"`` gives the purely gated composition, which is affine in
the state and cannot turn a Gaussian into anything else).
"""
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .errors import DimMismatchError, EmptyBatchError, EmptyEnsembleError, ShapeMismatchError

ACTIVATIONS = ("tanh", "none")


@dataclass(frozen=True)
class FlowDims:
    d: int
    obs_dim: int
    e_x: int = 8
    e_o: int = 8
    k: int = 2
    hidden: int = 32
    phi_hidden: int = 32
    g_hidden: int = 16
    activation: str = "tanh"

    def __post_init__(self):
        if self.k < 1:
            raise ShapeMismatchError("need at least one gated layer")
        if min(self.d, self.obs_dim, self.e_x, self.e_o, self.hidden,
               self.phi_hidden, self.g_hidden) < 1:
            raise ShapeMismatchError("all dimensions must be positive")
        if self.activation not in ACTIVATIONS:
            raise ShapeMismatchError(f"unknown activation {self.activation!r}")

    def layer_io(self, j):
        n_in = self.d if j == 0 else self.hidden
        n_out = self.d if j == self.k - 1 else self.hidden
        return n_in, n_out

    def shapes(self):
        """Ordered ``segment -> shape`` map defining the parameter layout."""
        s = {
            "phi.W1": (self.d, self.phi_hidden), "phi.b1": (1, self.phi_hidden),
            "phi.W2": (self.phi_hidden, self.e_x), "phi.b2": (1, self.e_x),
            "g.W1": (self.obs_dim, self.g_hidden), "g.b1": (1, self.g_hidden),
            "g.W2": (self.g_hidden, self.e_o), "g.b2": (1, self.e_o),
        }
        for j in range(self.k):
            n_in, n_out = self.layer_io(j)
            s[f"gated{j}.Wp"] = (self.e_x, n_out)
            s[f"gated{j}.Wo"] = (self.e_o, n_out)
            s[f"gated{j}.Wy"] = (n_in, n_out)
            s[f"gated{j}.b"] = (1, n_out)
            s[f"gated{j}.v"] = (1, n_out)
            s[f"gated{j}.c"] = (1, n_out)
        return s

    def to_dict(self):
        return dict(self.__dict__)


@dataclass(frozen=True)
class FlowParams:
    """All learnable weights, backed by a flat ParamVector."""

    dims: FlowDims
    vector: ad.ParamVector

    def __post_init__(self):
        expected = self.dims.shapes()
        got = {n: sh for n, _, sh in self.vector.layout}
        for name, shape in expected.items():
            if name not in got:
                raise ShapeMismatchError(f"segment {name!r} missing")
            if tuple(got[name]) != tuple(shape):
                raise ShapeMismatchError(
                    f"segment {name!r} has shape {tuple(got[name])}, expected {shape}")
        extra = set(got) - set(expected)
        if extra:
            raise ShapeMismatchError(f"unexpected segments {sorted(extra)}")

    @classmethod
    def from_vector(cls, dims, vector):
        return cls(dims, vector)

    @classmethod
    def zeros(cls, dims):
        return cls(dims, ad.ParamVector.from_arrays(
            {n: np.zeros(sh) for n, sh in dims.shapes().items()}))

    @classmethod
    def init(cls, dims, rng, final_scale=0.1):
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); last gated layer shrunk."""
        arrays = {}
        fan = {"phi": dims.d, "phi2": dims.phi_hidden, "g": dims.obs_dim, "g2": dims.g_hidden}
        for name, shape in dims.shapes().items():
            block, part = name.split(".")
            if block == "phi":
                fan_in = fan["phi"] if part.endswith("1") else fan["phi2"]
            elif block == "g":
                fan_in = fan["g"] if part.endswith("1") else fan["g2"]
            elif part in ("v", "c"):
                fan_in = 1
            else:
                j = int(block[5:])
                fan_in = dims.e_x + dims.e_o + dims.layer_io(j)[0]
            s = 1.0 / np.sqrt(fan_in)
            w = (2.0 * rng.uniform(shape) - 1.0) * s
            if block == f"gated{dims.k - 1}" and part in ("Wp", "Wo", "Wy", "b", "c"):
                w = w * final_scale
            arrays[name] = w
        return cls(dims, ad.ParamVector.from_arrays(arrays))

    def with_values(self, values):
        return FlowParams(self.dims, self.vector.with_values(values))

    @property
    def size(self):
        return self.vector.size


@dataclass(frozen=True)
class Context:
    particle_embedding: np.ndarray
    observation_embedding: np.ndarray


def _mlp(x, W1, b1, W2, b2):
    return ad.add(ad.matmul(ad.tanh(ad.add(ad.matmul(x, W1), b1)), W2), b2)


def _set_mean(rows, W1, b1, W2, b2):
    n = rows.value.shape[0]
    return ad.scale(ad.sum(_mlp(rows, W1, b1, W2, b2), axis=0), 1.0 / n)


def particle_embedding_var(positions, pv):
    return _set_mean(positions, pv["phi.W1"], pv["phi.b1"], pv["phi.W2"], pv["phi.b2"])


def observation_embedding_var(batch, pv):
    return _set_mean(batch, pv["g.W1"], pv["g.b1"], pv["g.W2"], pv["g.b2"])


def const_vars(params):
    return {n: ad.const(a) for n, a in params.vector.arrays().items()}


def _check_positions(positions, d):
    x = np.asarray(positions, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, d) if d > 1 or x.size == 0 else x.reshape(-1, 1)
    if x.shape[0] == 0:
        raise EmptyEnsembleError("empty particle ensemble")
    if x.shape[1] != d:
        raise DimMismatchError(f"particles have dim {x.shape[1]}, flow expects {d}")
    return x


def _check_batch(batch, obs_dim):
    o = np.asarray(batch, dtype=np.float64)
    if o.ndim == 1:
        o = o.reshape(1, -1) if obs_dim > 1 or o.size <= 1 else o.reshape(-1, 1)
    if o.size == 0:
        raise EmptyBatchError("empty observation batch")
    if o.shape[1] != obs_dim:
        raise DimMismatchError(f"observations have dim {o.shape[1]}, flow expects {obs_dim}")
    return o


def embed_particles(ensemble, params):
    """Mean of ``phi`` over the ensemble (permutation invariant)."""
    positions = getattr(ensemble, "positions", ensemble)
    x = _check_positions(positions, params.dims.d)
    out = particle_embedding_var(ad.const(x), const_vars(params))
    return out.value.reshape(-1).copy()


def embed_observations(batch, params):
    o = _check_batch(batch, params.dims.obs_dim)
    out = observation_embedding_var(ad.const(o), const_vars(params))
    return out.value.reshape(-1).copy()


def make_context(ensemble, batch, params):
    return Context(embed_particles(ensemble, params), embed_observations(batch, params))


class FlowField:
    """Velocity field of one Bayes update with the stage context frozen.

    Parameters
    ----------
    params : FlowParams
    pv : dict of Var, optional
        Parameter nodes to trace against; constants when omitted.
    positions : array or Var
        Stage-initial ensemble ``X_m``; only enters through the embedding.
    obs_batch : array
        The observation mini-batch for this update.
    context : Context, optional
        Use a precomputed context instead of ``positions``/``obs_batch``.
    divergence : {"exact", "hutchinson"}
    probes : array, optional
        Rademacher probes ``(n_probes, N, d)`` for the Hutchinson estimate.
    """

    def __init__(self, params, pv=None, positions=None, obs_batch=None, context=None,
                 divergence="exact", probes=None):
        self.dims = params.dims
        self.pv = const_vars(params) if pv is None else pv
        if context is not None:
            pe = ad.const(np.asarray(context.particle_embedding).reshape(1, -1))
            oe = ad.const(np.asarray(context.observation_embedding).reshape(1, -1))
        else:
            if not isinstance(positions, ad.Var):
                positions = ad.const(_check_positions(positions, self.dims.d))
            elif positions.value.shape[1] != self.dims.d:
                raise DimMismatchError("ensemble dimension does not match flow")
            pe = particle_embedding_var(positions, self.pv)
            oe = observation_embedding_var(ad.const(_check_batch(obs_batch, self.dims.obs_dim)),
                                           self.pv)
        self.particle_embedding, self.observation_embedding = pe, oe
        self.stage_bias = []
        for j in range(self.dims.k):
            p = self.pv
            self.stage_bias.append(ad.add(ad.add(ad.matmul(pe, p[f"gated{j}.Wp"]),
                                                 ad.matmul(oe, p[f"gated{j}.Wo"])),
                                          p[f"gated{j}.b"]))
        self.divergence_mode = divergence
        self.probes = probes
        self._gates = {}

    def context(self):
        return Context(self.particle_embedding.value.reshape(-1).copy(),
                       self.observation_embedding.value.reshape(-1).copy())

    def _gate(self, j, t):
        key = (j, t)
        if key not in self._gates:
            v, c = self.pv[f"gated{j}.v"], self.pv[f"gated{j}.c"]
            self._gates[key] = (ad.sigmoid(ad.add(ad.scale(v, t), c)), ad.scale(c, t))
        return self._gates[key]

    def velocity(self, x, t):
        """``x`` is an ``(N, d)`` Var; returns the ``(N, d)`` velocity Var."""
        h = x
        for j in range(self.dims.k):
            gate, drift = self._gate(j, float(t))
            pre = ad.add(ad.matmul(h, self.pv[f"gated{j}.Wy"]), self.stage_bias[j])
            h = ad.add(ad.mul(pre, gate), drift)
            if j < self.dims.k - 1 and self.dims.activation == "tanh":
                h = ad.tanh(h)
        return h

    def __call__(self, x, t):
        """Velocity and divergence ``(N, 1)`` at ``x``."""
        f = self.velocity(x, t)
        return f, divergence_of(f, x, self.divergence_mode, self.probes)


def divergence_of(f, x, mode="exact", probes=None):
    """Trace of ``df/dx`` per row, built from traced JVPs."""
    n, d = x.value.shape
    if mode == "exact":
        dirs = []
        for i in range(d):
            e = np.zeros((n, d))
            e[:, i] = 1.0
            dirs.append([e])
        masks = [dd[0] for dd in dirs]
    elif mode == "hutchinson":
        if probes is None:
            raise ShapeMismatchError("Hutchinson divergence needs probes")
        dirs = [[p] for p in probes]
        masks = list(probes)
    else:
        raise ShapeMismatchError(f"unknown divergence mode {mode!r}")
    tans = ad.tangents(f, [x], dirs)
    div = None
    for tv, m in zip(tans, masks):
        term = ad.sum(ad.mul(tv, ad.const(m)), axis=1)
        div = term if div is None else ad.add(div, term)
    if mode == "hutchinson":
        div = ad.scale(div, 1.0 / len(masks))
    return div


def _as_rows(x, d):
    a = np.asarray(x, dtype=np.float64)
    single = a.ndim == 1
    return (a.reshape(1, d) if single else a), single


def velocity(ctx, x, t, params):
    """Velocity at one state ``(d,)`` or a batch ``(N, d)``."""
    rows, single = _as_rows(x, params.dims.d)
    if rows.shape[1] != params.dims.d:
        raise DimMismatchError(f"state has dim {rows.shape[1]}, flow expects {params.dims.d}")
    f = FlowField(params, context=ctx).velocity(ad.const(rows), float(t))
    return f.value[0].copy() if single else f.value.copy()


def divergence(ctx, x, t, params, mode="exact", probes=None):
    """Exact divergence ``sum_i df_i/dx_i`` (context held fixed)."""
    rows, single = _as_rows(x, params.dims.d)
    if rows.shape[1] != params.dims.d:
        raise DimMismatchError(f"state has dim {rows.shape[1]}, flow expects {params.dims.d}")
    field = FlowField(params, context=ctx, divergence=mode, probes=probes)
    xv = ad.leaf(rows)
    _, div = field(xv, float(t))
    out = div.value.reshape(-1)
    return float(out[0]) if single else out.copy()


@dataclass
class AffineField:
    """Probe field ``f(x) = A x + b`` with constant divergence ``tr(A)``."""

    A: np.ndarray
    b: np.ndarray = dc_field(default=None)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        d = self.A.shape[0]
        self.b = np.zeros(d) if self.b is None else np.asarray(self.b, dtype=np.float64).reshape(d)

    def __call__(self, x, t):
        f = ad.add(ad.matmul(x, ad.const(self.A.T)), ad.const(self.b.reshape(1, -1)))
        n = x.value.shape[0]
        return f, ad.const(np.full((n, 1), np.trace(self.A)))
