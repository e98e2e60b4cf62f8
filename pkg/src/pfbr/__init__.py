"""Particle flow Bayes' rule: learned ODE transport for sequential inference."""
from .autodiff import ParamVector
from .errors import *  # noqa: F401,F403
from .flownet import Context, FlowDims, FlowParams
from .models import GaussianPosterior
from .ode import IntegratorConfig, solve_ivp
from .particle_flow import (ParticleEnsemble, apply_operator, grad_adjoint, grad_backprop,
                            sequential_inference, task_loss)
from .rng import Rng
from .tasks import GaussianPrior, InferenceTask, KDEPrior

__all__ = [
    "ParamVector", "Context", "FlowDims", "FlowParams", "GaussianPosterior",
    "IntegratorConfig", "solve_ivp", "ParticleEnsemble", "apply_operator", "grad_adjoint",
    "grad_backprop", "sequential_inference", "task_loss", "Rng", "GaussianPrior",
    "InferenceTask", "KDEPrior",
]
__version__ = "0.1.0"
