"""Watch log-densities travel with particles under two hand-written flows.

The first flow is linear, so the log-density change along every path is
exactly ``-t * trace(A)``. The second is the analytic Fokker-Planck flow for
a 1-d conjugate update, whose ensemble relaxes onto the exact posterior.

Run from the repository root::

    python3 demos/density_transport.py
"""
import numpy as np

from pfbr import models as mdl
from pfbr.flownet import AffineField
from pfbr.ode import IntegratorConfig, solve_ivp
from pfbr.particle_flow import ParticleEnsemble, apply_operator
from pfbr.rng import Rng


def affine_probe():
    A = np.array([[-0.3, 0.8], [-0.5, 0.1]])
    ens = ParticleEnsemble(Rng(0).normal((5, 2)), np.zeros(5))
    out = apply_operator(ens, [[0.0, 0.0]], None, IntegratorConfig("rk4", 64),
                         field=AffineField(A))
    print("affine flow: log-density change per particle", out.logdens.round(10))
    print(f"             expected -trace(A) = {-np.trace(A):+.10f}")


def fokker_planck(times=(0.0, 0.5, 1.0, 2.0, 5.0, 10.0)):
    x0 = Rng(1).normal(10_000)
    flow = mdl.FokkerPlanckFlow1D((0.0, 1.0), (1.5, 3.0), q0=(x0.mean(), x0.var()))
    print(f"\nFokker-Planck flow towards N({flow.post_mean:.4f}, {flow.post_var:.4f})")
    print("    t      mean   variance")
    for t in times:
        x = x0 if t == 0 else solve_ivp(flow.velocity, x0, IntegratorConfig("rk4", 40 * int(t + 1),
                                                                              0.0, t))
        print(f"{t:5.1f}  {x.mean():+.5f}  {x.var():.5f}")


if __name__ == "__main__":
    affine_probe()
    fokker_planck()
