"""Distances between particle sets and exact posteriors."""
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import ConfigError, DimMismatchError
from .tasks import kde_log_density, scott_bandwidth

KERNELS = ("rbf", "laplacian", "polynomial", "sigmoid", "cosine")
_MEDIAN_POINTS = 2000


@dataclass(frozen=True)
class KernelSpec:
    """Kernel choice and hyperparameters.

    ``lengthscale=None`` selects the median heuristic for RBF and Laplacian.
    Polynomial ``(gamma <x,y> + coef0)^degree`` and sigmoid
    ``tanh(gamma <x,y> + coef0)`` use ``gamma = 1/d`` when ``gamma`` is None;
    these defaults are arbitrary.
    """

    kind: str = "rbf"
    lengthscale: float = None
    gamma: float = None
    coef0: float = 1.0
    degree: int = 3

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ConfigError(f"unknown kernel {self.kind!r}")
        if self.lengthscale is not None and not self.lengthscale > 0:
            raise ConfigError("kernel lengthscale must be positive")
        if self.gamma is not None and not self.gamma > 0:
            raise ConfigError("kernel gamma must be positive")
        if int(self.degree) < 1:
            raise ConfigError("polynomial degree must be >= 1")


def median_heuristic(X, Y):
    """Median pairwise Euclidean distance of the pooled sample.

    Large pools are sorted lexicographically and thinned to a fixed size,
    so the result does not depend on the ordering of the inputs.
    """
    Z = np.concatenate([X, Y])
    if Z.shape[0] > _MEDIAN_POINTS:
        Z = Z[np.lexsort(Z.T[::-1])]
        Z = Z[np.linspace(0, Z.shape[0] - 1, _MEDIAN_POINTS).astype(int)]
    med = float(np.median(pdist(Z))) if Z.shape[0] > 1 else 1.0
    return med if med > 0 else 1.0


def gram(X, Y, k, lengthscale=None):
    ls = k.lengthscale if lengthscale is None else lengthscale
    d = X.shape[1]
    gamma = 1.0 / d if k.gamma is None else k.gamma
    if k.kind == "rbf":
        return np.exp(-cdist(X, Y, "sqeuclidean") / (2.0 * ls * ls))
    if k.kind == "laplacian":
        return np.exp(-cdist(X, Y, "cityblock") / ls)
    if k.kind == "polynomial":
        return (gamma * (X @ Y.T) + k.coef0) ** k.degree
    if k.kind == "sigmoid":
        return np.tanh(gamma * (X @ Y.T) + k.coef0)
    nx = np.linalg.norm(X, axis=1)
    ny = np.linalg.norm(Y, axis=1)
    denom = np.outer(nx, ny)
    return np.divide(X @ Y.T, denom, out=np.zeros_like(denom), where=denom > 0)


def _pair(X, Y):
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    X = X.reshape(-1, 1) if X.ndim == 1 else X
    Y = Y.reshape(-1, 1) if Y.ndim == 1 else Y
    if X.shape[0] == 0 or Y.shape[0] == 0:
        raise DimMismatchError("sample sets must be non-empty")
    if X.shape[1] != Y.shape[1]:
        raise DimMismatchError(f"sample dims differ: {X.shape[1]} vs {Y.shape[1]}")
    return X, Y


def mmd2(X, Y, k=None):
    """Biased (V-statistic) squared MMD over all pairs, diagonal included.

    The pair is put in a canonical order first so that ``mmd2(X, Y)`` and
    ``mmd2(Y, X)`` perform identical arithmetic.
    """
    k = k or KernelSpec()
    X, Y = _pair(X, Y)
    if (X.shape[0], X.tobytes()) > (Y.shape[0], Y.tobytes()):
        X, Y = Y, X
    ls = k.lengthscale
    if ls is None and k.kind in ("rbf", "laplacian"):
        ls = median_heuristic(X, Y)
    kxx = gram(X, X, k, ls).mean()
    kyy = gram(Y, Y, k, ls).mean()
    kxy = gram(X, Y, k, ls).mean()
    return float((kxx + kyy) - 2.0 * kxy)


def cross_entropy(samples_p, q_particles, bandwidth="scott"):
    """``-mean log qhat(x)`` over ``x ~ p`` with ``qhat`` a KDE of the particles."""
    P, Q = _pair(samples_p, q_particles)
    sigma = scott_bandwidth(Q) if bandwidth == "scott" else float(bandwidth)
    return float(-np.mean(kde_log_density(Q, sigma, P)))


# ------------------------------------------------------------------ integrals

def _test(spec, d):
    kind = spec.get("kind")
    A = np.atleast_2d(np.asarray(spec.get("A", np.eye(d)), dtype=np.float64))
    if kind == "mean":
        return kind, None, None, None, None
    if A.shape[1] != d:
        raise DimMismatchError(f"test matrix A has {A.shape[1]} columns, state dim is {d}")
    if kind == "quadratic":
        if A.shape[0] != d:
            raise DimMismatchError("quadratic test needs a square A")
        return kind, A, None, None, None
    if kind == "bilinear":
        B = np.atleast_2d(np.asarray(spec.get("B", np.eye(d)), dtype=np.float64))
        a = np.asarray(spec.get("a", np.zeros(A.shape[0])), dtype=np.float64).reshape(-1)
        b = np.asarray(spec.get("b", np.zeros(B.shape[0])), dtype=np.float64).reshape(-1)
        if B.shape != A.shape or a.size != A.shape[0] or b.size != B.shape[0]:
            raise DimMismatchError("bilinear test needs matching A, a, B, b")
        return kind, A, a, B, b
    raise ConfigError(f"unknown test function {kind!r}")


def default_tests(d):
    """``E[x]``, ``E[x^T x]`` and ``E[(x + 1)^T (x - 1)]``."""
    return [{"kind": "mean"},
            {"kind": "quadratic", "A": np.eye(d)},
            {"kind": "bilinear", "A": np.eye(d), "a": np.ones(d), "B": np.eye(d),
             "b": -np.ones(d)}]


def closed_form(spec, truth):
    """Exact expectation of a test function under a Gaussian."""
    mu, S = truth.mean, truth.cov
    kind, A, a, B, b = _test(spec, mu.size)
    if kind == "mean":
        return mu.copy()
    if kind == "quadratic":
        return float(np.trace(A @ S) + mu @ A @ mu)
    return float(np.trace(A @ S @ B.T) + (A @ mu + a) @ (B @ mu + b))


def monte_carlo(spec, samples):
    """Per-sample values of a test function (average them for the estimate)."""
    X = np.atleast_2d(samples)
    kind, A, a, B, b = _test(spec, X.shape[1])
    if kind == "mean":
        return X
    if kind == "quadratic":
        return np.einsum("ni,ij,nj->n", X, A, X)
    return ((X @ A.T + a) * (X @ B.T + b)).sum(axis=1)


def integral_discrepancy(q_particles, truth, tests=None):
    """``|| mean_n h(x_n) - E_truth[h] ||_2`` for each test function ``h``."""
    X = np.asarray(q_particles, dtype=np.float64)
    X = X.reshape(-1, 1) if X.ndim == 1 else X
    if X.shape[1] != truth.d:
        raise DimMismatchError(f"particles have dim {X.shape[1]}, truth has {truth.d}")
    tests = default_tests(truth.d) if tests is None else tests
    out = []
    for spec in tests:
        est = monte_carlo(spec, X).mean(axis=0)
        out.append(float(np.linalg.norm(np.atleast_1d(est - closed_form(spec, truth)))))
    return out
