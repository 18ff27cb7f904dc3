"""Streaming SGD with one fresh Gaussian sample per step.

The update is the sqrt(d)-scaled rule

    x_{k+1} = x_k - gamma(k/d)/sqrt(d) * f'(r_k) * (grad psi)^T a_{k+1},

with r_k = W^T a_{k+1} / sqrt(d) restricted to its first two rows and
f'(r) = 2s (r1 - r2).  One unit of rescaled time t = k/d is d steps.
Samples are generated on the fly and never stored; memory is O(d).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .model import ModelConfig, ProblemInstance, grad_psi, psi, split_x
from .spectra import stream
from .trajectory import Recorder, TrajectoryRecord, default_grid, resolve_statistics

Array = np.ndarray

_SGD_STREAM = 2


@dataclass
class SgdState:
    """Step counter (integer, so t = k/d is exact), iterate, RNG stream."""

    k: int
    x: Array
    rng: np.random.Generator


def init_state(instance: ProblemInstance, seed: int = 0, run_id: int = 0) -> SgdState:
    return SgdState(k=0, x=instance.x0.copy(), rng=stream(seed, _SGD_STREAM, run_id))


def draw_sample(instance: ProblemInstance, rng: np.random.Generator) -> Array:
    """One fresh a ~ N(0, K)."""
    z = rng.standard_normal(instance.d)
    if instance.is_diagonal:
        return np.sqrt(instance.k_diag) * z
    return np.linalg.cholesky(instance.k_full) @ z


def sgd_step(
    state: SgdState,
    config: ModelConfig,
    instance: ProblemInstance,
    sample: Array | None = None,
) -> SgdState:
    """One SGD step; ``sample`` overrides the drawn a_{k+1} for testing."""
    a = draw_sample(instance, state.rng) if sample is None else np.asarray(sample, float)
    u, v = split_x(state.x)
    p = psi(config, u, v)
    sqrt_d = np.sqrt(instance.d)
    r1 = p @ a / sqrt_d
    r2 = instance.beta_star @ a / sqrt_d
    dfr = 2.0 * config.loss_scale * (r1 - r2)
    gamma_k = instance.gamma_fn(state.k / instance.d)
    du, dv = grad_psi(config, u, v)
    coef = gamma_k / sqrt_d * dfr
    x_new = np.concatenate([u - coef * du * a, v - coef * dv * a])
    return SgdState(k=state.k + 1, x=x_new, rng=state.rng)


def run_sgd(
    config: ModelConfig,
    instance: ProblemInstance,
    horizon: float,
    record_grid: Array | None = None,
    stats=("risk",),
    seed: int = 0,
    run_id: int = 0,
    record_paths: bool = False,
) -> TrajectoryRecord:
    """Execute floor(T*d) steps, recording statistics at grid times via
    k = floor(t*d).  Non-finite iterates censor the run with +inf values
    from the first grid time they are observed."""
    if horizon <= 0:
        raise ParameterError("horizon must be positive")
    grid = default_grid(horizon) if record_grid is None else np.asarray(record_grid, float)
    if grid.min() < 0 or grid.max() > horizon + 1e-12:
        raise ParameterError("record grid must lie in [0, T]")
    statistics = resolve_statistics(stats, config)
    rec = Recorder(grid, statistics, config, instance, record_paths)

    d = instance.d
    rng = stream(seed, _SGD_STREAM, run_id)
    s = config.loss_scale
    q11, q12, q22 = config.q11, config.q12, config.q22
    l1, l2, c = config.l1, config.l2, config.c
    beta = instance.beta_star
    sqrt_d = np.sqrt(d)
    diag_cov = instance.is_diagonal
    if diag_cov:
        sqrt_k = np.sqrt(instance.k_diag)
    else:
        chol_k = np.linalg.cholesky(instance.k_full)
    gamma_fn = instance.gamma_fn

    u = instance.u0.copy()
    v = instance.v0.copy()
    total_steps = int(np.floor(horizon * d))
    record_ks = np.minimum(np.floor(grid * d).astype(int), total_steps)

    k = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for j, kj in enumerate(record_ks):
            while k < kj and not rec.diverged:
                z = rng.standard_normal(d)
                a = sqrt_k * z if diag_cov else chol_k @ z
                p = q11 * u * u + 2.0 * q12 * u * v + q22 * v * v + l1 * u + l2 * v + c
                dfr = 2.0 * s * ((p - beta) @ a) / sqrt_d
                coef = gamma_fn(k / d) / sqrt_d * dfr
                du = 2.0 * q11 * u + 2.0 * q12 * v + l1
                dv = 2.0 * q12 * u + 2.0 * q22 * v + l2
                u = u - coef * du * a
                v = v - coef * dv * a
                k += 1
            rec.record(j, grid[j], np.concatenate([u, v]))
    return rec.finish(run_id, "sgd")
