"""Euler-Maruyama integrators for the three continuous-time dynamics.

hsgd    dX = -gamma(t) d grad R dt + gamma(t) sqrt(I(B)) (grad psi)^T sqrt(K) dB
sgf     dX = -d grad R dt + sqrt(gamma(t) I(B)) (grad psi)^T sqrt(K) dB
nondiag dX = -gamma(t) d grad R dt
             + gamma(t) (I(B) (grad psi)^T K grad psi + d grad R grad R^T)^{1/2} dB

For the diagonal dynamics one Brownian coordinate drives both u_i and v_i,
because (grad psi)^T maps R^d into R^{2d}.  Coefficients are evaluated at
the pre-step state (Ito convention).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ModelViolationError, ParameterError
from .model import ModelConfig, ProblemInstance, split_x
from .spectra import stream
from .trajectory import Recorder, TrajectoryRecord, default_grid, resolve_statistics

Array = np.ndarray

MAX_DT = 1.0 / 16.0
DEFAULT_DT = 2.0**-8
NONDIAG_MAX_D = 512

_STREAMS = {"hsgd": 3, "sgf": 4, "nondiag": 5}


@dataclass
class SdeState:
    """Integer step counter (t = step * dt), iterate, RNG stream."""

    step: int
    x: Array
    rng: np.random.Generator


def init_state(
    instance: ProblemInstance, dynamics: str, seed: int = 0, run_id: int = 0
) -> SdeState:
    if dynamics not in _STREAMS:
        raise ParameterError(f"unknown dynamics {dynamics!r}")
    return SdeState(
        step=0, x=instance.x0.copy(), rng=stream(seed, _STREAMS[dynamics], run_id)
    )


def _check_dt(dt: float):
    if not 0 < dt <= MAX_DT:
        raise ParameterError(f"dt must lie in (0, {MAX_DT}]")


def diagonal_increment(
    u: Array,
    v: Array,
    xi: Array,
    config: ModelConfig,
    beta: Array,
    k_diag: Array,
    gamma_t: float,
    dt: float,
    dynamics: str,
) -> tuple[Array, Array]:
    """One Euler-Maruyama step of hsgd or sgf; broadcasts over leading axes.

    xi is the standard normal driver shared by the u- and v-components.
    """
    d = u.shape[-1]
    s = config.loss_scale
    p = (
        config.q11 * u * u
        + 2.0 * config.q12 * u * v
        + config.q22 * v * v
        + config.l1 * u
        + config.l2 * v
        + config.c
    )
    resid = p - beta
    kr = k_diag * resid
    risk = s * np.sum(resid * kr, axis=-1, keepdims=True) / d
    noise_coeff = 4.0 * s * risk
    du = 2.0 * config.q11 * u + 2.0 * config.q12 * v + config.l1
    dv = 2.0 * config.q12 * u + 2.0 * config.q22 * v + config.l2
    # d * grad R, coordinatewise
    drift_u = 2.0 * s * du * kr
    drift_v = 2.0 * s * dv * kr
    sqrt_k = np.sqrt(k_diag)
    if dynamics == "hsgd":
        drift_scale = gamma_t
        amp = gamma_t * np.sqrt(noise_coeff)
    elif dynamics == "sgf":
        drift_scale = 1.0
        amp = np.sqrt(gamma_t * noise_coeff)
    else:
        raise ParameterError(f"diagonal_increment does not handle {dynamics!r}")
    shock = amp * sqrt_k * xi * np.sqrt(dt)
    u_new = u - drift_scale * drift_u * dt + shock * du
    v_new = v - drift_scale * drift_v * dt + shock * dv
    return u_new, v_new


def _diag_step(state, config, instance, dt, dynamics, xi=None):
    _check_dt(dt)
    if not instance.is_diagonal:
        raise ParameterError(f"{dynamics} requires a diagonal covariance")
    u, v = split_x(state.x)
    if xi is None:
        xi = state.rng.standard_normal(instance.d)
    gamma_t = instance.gamma_fn(state.step * dt)
    u_new, v_new = diagonal_increment(
        u, v, xi, config, instance.beta_star, instance.k_diag, gamma_t, dt, dynamics
    )
    return SdeState(state.step + 1, np.concatenate([u_new, v_new]), state.rng)


def hsgd_step(state, config, instance, dt=DEFAULT_DT, xi=None) -> SdeState:
    """Homogenized SGD step (drift and noise both proportional to gamma)."""
    return _diag_step(state, config, instance, dt, "hsgd", xi)


def sgf_step(state, config, instance, dt=DEFAULT_DT, xi=None) -> SdeState:
    """Stochastic gradient flow step (gamma-free drift, sqrt(gamma) noise)."""
    return _diag_step(state, config, instance, dt, "sgf", xi)


def nondiag_diffusion(
    config: ModelConfig, instance: ProblemInstance, x: Array
) -> tuple[Array, Array]:
    """Assemble (Sigma, d*grad R) for the full-covariance SDE."""
    d = instance.d
    s = config.loss_scale
    k = instance.k_full if not instance.is_diagonal else np.diag(instance.k_diag)
    u, v = split_x(x)
    p = (
        config.q11 * u * u
        + 2.0 * config.q12 * u * v
        + config.q22 * v * v
        + config.l1 * u
        + config.l2 * v
        + config.c
    )
    resid = p - instance.beta_star
    kr = k @ resid
    risk = s * resid @ kr / d
    noise_coeff = 4.0 * s * risk
    du = 2.0 * config.q11 * u + 2.0 * config.q12 * v + config.l1
    dv = 2.0 * config.q12 * u + 2.0 * config.q22 * v + config.l2
    d_grad = 2.0 * s * np.concatenate([du * kr, dv * kr])
    # (grad psi)^T K grad psi as four diagonal-scaled blocks
    top = np.concatenate([du[:, None] * k * du[None, :], du[:, None] * k * dv[None, :]], axis=1)
    bot = np.concatenate([dv[:, None] * k * du[None, :], dv[:, None] * k * dv[None, :]], axis=1)
    quad = np.concatenate([top, bot], axis=0)
    sigma = noise_coeff * quad + np.outer(d_grad, d_grad) / d
    return sigma, d_grad


def sqrtm_psd(sigma: Array) -> Array:
    """Symmetric PSD square root by eigendecomposition.

    Eigenvalues in [-1e-10 * ||Sigma||, 0) are clamped to zero; anything
    below -1e-6 * ||Sigma|| signals a modeling bug.
    """
    evals, evecs = np.linalg.eigh(sigma)
    scale = float(np.max(np.abs(evals))) if evals.size else 0.0
    if scale and evals.min() < -1e-6 * scale:
        raise ModelViolationError(
            f"diffusion matrix has eigenvalue {evals.min():.3e} < -1e-6*norm"
        )
    evals = np.clip(evals, 0.0, None)
    return (evecs * np.sqrt(evals)) @ evecs.T


def nondiag_step(state, config, instance, dt=DEFAULT_DT, xi=None) -> SdeState:
    """Full-covariance SDE step, driven by a 2d-dimensional Brownian."""
    _check_dt(dt)
    if instance.d > NONDIAG_MAX_D:
        raise ParameterError(f"nondiag dynamics guarded to d <= {NONDIAG_MAX_D}")
    sigma, d_grad = nondiag_diffusion(config, instance, state.x)
    if xi is None:
        xi = state.rng.standard_normal(2 * instance.d)
    if not np.all(np.isfinite(sigma)):
        # overflowing path: hand the divergence sentinel to the recorder
        return SdeState(state.step + 1, np.full_like(state.x, np.nan), state.rng)
    root = sqrtm_psd(sigma)
    gamma_t = instance.gamma_fn(state.step * dt)
    x_new = state.x - gamma_t * d_grad * dt + gamma_t * (root @ xi) * np.sqrt(dt)
    return SdeState(state.step + 1, x_new, state.rng)


_STEPPERS = {"hsgd": hsgd_step, "sgf": sgf_step, "nondiag": nondiag_step}


def run_sde(
    config: ModelConfig,
    instance: ProblemInstance,
    dynamics: str,
    horizon: float,
    dt: float = DEFAULT_DT,
    record_grid: Array | None = None,
    stats=("risk",),
    seed: int = 0,
    run_id: int = 0,
    record_paths: bool = False,
) -> TrajectoryRecord:
    """Integrate one path to the horizon, recording at grid times (state at
    step floor(t/dt)).  Divergence censors the run like the SGD engine."""
    if horizon <= 0:
        raise ParameterError("horizon must be positive")
    _check_dt(dt)
    if dynamics not in _STEPPERS:
        raise ParameterError(f"unknown dynamics {dynamics!r}")
    grid = default_grid(horizon) if record_grid is None else np.asarray(record_grid, float)
    statistics = resolve_statistics(stats, config)
    rec = Recorder(grid, statistics, config, instance, record_paths)
    stepper = _STEPPERS[dynamics]
    state = init_state(instance, dynamics, seed, run_id)
    total_steps = int(np.floor(horizon / dt + 1e-9))
    record_steps = np.minimum(np.floor(grid / dt + 1e-9).astype(int), total_steps)
    with np.errstate(over="ignore", invalid="ignore"):
        for j, nj in enumerate(record_steps):
            while state.step < nj and not rec.diverged:
                state = stepper(state, config, instance, dt)
                if not np.all(np.isfinite(state.x)):
                    break
            rec.record(j, grid[j], state.x)
    return rec.finish(run_id, dynamics)
