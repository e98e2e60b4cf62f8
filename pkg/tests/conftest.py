import numpy as np
import pytest

from pfbr.flownet import FlowDims, FlowParams
from pfbr.rng import Rng


def central_diff(fn, x, h=1e-5):
    """Central finite-difference gradient of a scalar function of a flat array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (fn(xp) - fn(xm)) / (2.0 * h)
    return g


def rel_err(a, b):
    """Normwise relative error ``max|a - b| / max|b|``."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def tiny_dims(d=1, obs_dim=None, **kw):
    base = dict(e_x=3, e_o=3, k=2, hidden=6, phi_hidden=5, g_hidden=4)
    base.update(kw)
    return FlowDims(d=d, obs_dim=d if obs_dim is None else obs_dim, **base)


@pytest.fixture
def rng():
    return Rng(12345)


@pytest.fixture
def tiny_params():
    return FlowParams.init(tiny_dims(), Rng(7), final_scale=1.0)
