"""Fixed-step explicit Runge-Kutta integration.

States may be numpy arrays, autodiff ``Var`` nodes, or tuples of either; the
same stepping code therefore serves plain forward solves and traced solves
that are later differentiated.
"""
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NonFiniteError

# Butcher tableaus: (a, b, c); a is lower-triangular, row i has i entries
TABLEAUS = {
    "euler": ((), (1.0,), (0.0,)),
    "midpoint": (((0.5,),), (0.0, 1.0), (0.0, 0.5)),
    "rk4": (((0.5,), (0.0, 0.5), (0.0, 0.0, 1.0)),
            (1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0),
            (0.0, 0.5, 0.5, 1.0)),
}
NOMINAL_ORDER = {"euler": 1, "midpoint": 2, "rk4": 4}


@dataclass(frozen=True)
class IntegratorConfig:
    method: str = "rk4"
    steps: int = 20
    t0: float = 0.0
    t1: float = 1.0

    def __post_init__(self):
        if self.method not in TABLEAUS:
            raise ConfigError(f"unknown integrator method {self.method!r}")
        if int(self.steps) < 1:
            raise ConfigError("integrator steps must be >= 1")

    @property
    def h(self):
        return (self.t1 - self.t0) / self.steps

    def times(self):
        return [self.t0 + i * self.h for i in range(self.steps)]

    def reversed(self):
        return IntegratorConfig(self.method, self.steps, self.t1, self.t0)


def _combine(s, h, coeffs, ks):
    """``s + h * sum(c_j * k_j)`` over (possibly tuple) states, skipping zeros."""
    if isinstance(s, tuple):
        return tuple(_combine(si, h, coeffs, [k[i] for k in ks]) for i, si in enumerate(s))
    acc = None
    for c, k in zip(coeffs, ks):
        if c == 0.0:
            continue
        term = k * (h * c)
        acc = term if acc is None else acc + term
    return s if acc is None else s + acc


def _finite(s):
    if isinstance(s, tuple):
        return all(_finite(x) for x in s)
    v = getattr(s, "value", s)
    return bool(np.all(np.isfinite(v)))


def rk_step(field, s, t, h, method="rk4"):
    a, b, c = TABLEAUS[method]
    ks = [field(s, t)]
    for i, row in enumerate(a):
        ks.append(field(_combine(s, h, row, ks), t + c[i + 1] * h))
    return _combine(s, h, b, ks)


def solve_ivp(field, s0, cfg=None, trajectory=False):
    """Integrate ``ds/dt = field(s, t)`` from ``cfg.t0`` to ``cfg.t1``.

    Parameters
    ----------
    field : callable
        ``field(state, t) -> derivative`` with the same structure as the state.
    s0 : array, Var or tuple
        Initial state.
    cfg : IntegratorConfig
        Method and uniform step count; ``t1 < t0`` integrates backwards.
    trajectory : bool
        Also return the list of states at every grid point.

    Raises
    ------
    NonFiniteError
        With ``step`` set to the index of the failing step.
    """
    cfg = cfg or IntegratorConfig()
    h = cfg.h
    s = s0
    path = [s0] if trajectory else None
    for i in range(cfg.steps):
        t = cfg.t0 + i * h
        try:
            s = rk_step(field, s, t, h, cfg.method)
        except NonFiniteError as err:
            e = NonFiniteError(f"step {i}: {err}")
            e.step = i
            raise e from err
        if not _finite(s):
            e = NonFiniteError(f"non-finite state after step {i}")
            e.step = i
            raise e
        if trajectory:
            path.append(s)
    return (s, path) if trajectory else s


# closed-form test problems: (field, s0, t0, t1, exact(t1))
TEST_PROBLEMS = {
    "exponential": (lambda s, t: s, np.array([1.0]), 0.0, 1.0, np.array([math.e])),
    "rotation": (lambda s, t: np.array([-s[1], s[0]]), np.array([1.0, 0.0]), 0.0, 1.0,
                 np.array([math.cos(1.0), math.sin(1.0)])),
}


def order_check(method, problem="exponential", steps=None):
    """Observed convergence order ``log2(err(h) / err(h/2))``."""
    field, s0, t0, t1, exact = TEST_PROBLEMS[problem] if isinstance(problem, str) else problem
    if steps is None:
        steps = {"euler": 64, "midpoint": 32, "rk4": 8}[method]
    errs = []
    for n in (steps, 2 * steps):
        s = solve_ivp(field, s0, IntegratorConfig(method, n, t0, t1))
        errs.append(float(np.max(np.abs(s - exact))))
    return math.log2(errs[0] / errs[1])
