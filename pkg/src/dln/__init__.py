"""High-dimensional SGD on diagonal linear networks: simulation, diffusion
approximations, deterministic limits, and the entropy-barrier analysis."""

from .model import (
    ModelConfig,
    ProblemInstance,
    preset,
    psi,
    grad_psi,
    risk,
    noise_coeff,
    hessian_trace,
)

__all__ = [
    "ModelConfig",
    "ProblemInstance",
    "preset",
    "psi",
    "grad_psi",
    "risk",
    "noise_coeff",
    "hessian_trace",
]

__version__ = "0.1.0"
