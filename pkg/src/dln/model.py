"""Diagonal-network model family: inner map, derivatives, risk, statistics.

The model is the two-layer diagonal network with a coordinatewise quadratic
inner map

    psi_i(u, v) = q11*u_i^2 + 2*q12*u_i*v_i + q22*v_i^2 + l1*u_i + l2*v_i + c

under mean-squared error with Gaussian data of covariance K.  The risk and
the gradient-noise coefficient are functions of the 3x3 summary matrix
B = W^T K W / d built from W = [psi(x) | beta* | 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DimensionError,
    NumericalOverflowError,
    ParameterError,
)

Array = np.ndarray

# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ModelConfig:
    """Parametrization matrix Q (symmetric, q12 stored once), linear term,
    offset, and the loss scale s in R(x) = (s/d) * ||psi(x) - beta*||_K^2."""

    q11: float
    q12: float
    q22: float
    l1: float = 0.0
    l2: float = 0.0
    c: float = 0.0
    loss_scale: float = 0.5

    def __post_init__(self):
        if self.loss_scale <= 0:
            raise ParameterError("loss_scale must be positive")

    @property
    def s(self) -> float:
        return self.loss_scale

    def dh_first_column(self, B: Array) -> Array:
        """First-column gradient entries (dh/dB11, dh/dB21, dh/dB31) of the
        risk summary h(B) = s*(B11 - B12 - B21 + B22); constant for MSE."""
        s = self.loss_scale
        return np.array([s, -s, 0.0])

    def h_of_B(self, B: Array) -> float:
        s = self.loss_scale
        return float(s * (B[0, 0] - B[0, 1] - B[1, 0] + B[1, 1]).real)

    def I_of_B(self, B: Array) -> float:
        """Gradient-noise coefficient I(B) = E[(d f/d r1)^2] = 4s*h(B)."""
        return 4.0 * self.loss_scale * self.h_of_B(B)


_PRESETS = {
    # hadamard: psi = u (.) v under the 1/(2d) loss
    "hadamard": dict(q11=0.0, q12=0.5, q22=0.0, loss_scale=0.5),
    # squared: psi = u^2 - v^2 under the 1/(4d) loss
    "squared": dict(q11=1.0, q12=0.0, q22=-1.0, loss_scale=0.25),
    # linear: psi = u, classical least squares
    "linear": dict(q11=0.0, q12=0.0, q22=0.0, l1=1.0, loss_scale=0.5),
}


def preset(name: str) -> ModelConfig:
    """Named model presets: 'hadamard', 'squared', 'linear'."""
    try:
        return ModelConfig(**_PRESETS[name])
    except KeyError:
        raise ParameterError(f"unknown model preset {name!r}") from None


# ---------------------------------------------------------------------------
# problem instance


def as_schedule(gamma) -> Callable[[float], float]:
    """Normalize a stepsize spec (constant or callable of rescaled time)."""
    if callable(gamma):
        return gamma
    g = float(gamma)
    return lambda t: g


@dataclass
class PiecewiseConstantSchedule:
    """gamma(t) = values[j] on [breaks[j], breaks[j+1]); last value beyond."""

    breaks: Sequence[float]
    values: Sequence[float]

    def __post_init__(self):
        if len(self.values) != len(self.breaks):
            raise DimensionError("need one value per break")
        if list(self.breaks) != sorted(self.breaks):
            raise ParameterError("breaks must be increasing")

    def __call__(self, t: float) -> float:
        idx = int(np.searchsorted(self.breaks, t, side="right")) - 1
        return float(self.values[max(idx, 0)])


@dataclass
class ProblemInstance:
    """Dimension, signal, covariance, initialization, and stepsize schedule.

    The covariance is diagonal (``k_diag``, the default assumption) or a
    full symmetric PSD matrix (``k_full``, used only by the non-diagonal
    SDE experiments).  beta_star and the covariance are immutable per
    instance.
    """

    d: int
    beta_star: Array
    x0: Array
    gamma: object  # constant, callable, or PiecewiseConstantSchedule
    k_diag: Array | None = None
    k_full: Array | None = None
    kbar: float | None = None
    trace_flag: bool = field(init=False, default=False)

    def __post_init__(self):
        if self.d < 1:
            raise ParameterError("dimension must be >= 1")
        self.beta_star = np.asarray(self.beta_star, dtype=float)
        self.x0 = np.asarray(self.x0, dtype=float)
        if self.beta_star.shape != (self.d,):
            raise DimensionError("beta_star must have length d")
        if self.x0.shape != (2 * self.d,):
            raise DimensionError("x0 must have length 2d")
        if (self.k_diag is None) == (self.k_full is None):
            raise ParameterError("provide exactly one of k_diag, k_full")
        if self.k_diag is not None:
            self.k_diag = np.asarray(self.k_diag, dtype=float)
            if self.k_diag.shape != (self.d,):
                raise DimensionError("k_diag must have length d")
            if np.any(self.k_diag < 0):
                raise ParameterError("k_diag entries must be nonnegative")
            entries = self.k_diag
        else:
            self.k_full = np.asarray(self.k_full, dtype=float)
            if self.k_full.shape != (self.d, self.d):
                raise DimensionError("k_full must be d x d")
            entries = np.diag(self.k_full)
        if not np.all(np.isfinite(self.beta_star)):
            raise ParameterError("beta_star must be finite")
        if self.kbar is None:
            self.kbar = float(np.max(entries)) if self.d else 0.0
        elif np.max(entries) > self.kbar * (1 + 1e-12):
            raise ParameterError("covariance entries exceed declared bound")
        # trace Theta(d) audit: flag, don't reject
        mean_entry = float(np.mean(entries))
        self.trace_flag = not (0.1 <= mean_entry <= 10.0)
        self.gamma_fn = as_schedule(self.gamma)

    @property
    def is_diagonal(self) -> bool:
        return self.k_diag is not None

    @property
    def u0(self) -> Array:
        return self.x0[: self.d]

    @property
    def v0(self) -> Array:
        return self.x0[self.d :]

    @property
    def beta_inf_norm(self) -> float:
        return float(np.max(np.abs(self.beta_star))) if self.d else 0.0

    @property
    def x0_inf_norm(self) -> float:
        return float(np.max(np.abs(self.x0))) if self.d else 0.0

    def k_op_norm(self) -> float:
        if self.is_diagonal:
            return float(np.max(self.k_diag))
        return float(np.linalg.norm(self.k_full, 2))

    def apply_k(self, vec: Array) -> Array:
        return self.k_diag * vec if self.is_diagonal else self.k_full @ vec


def split_x(x: Array) -> tuple[Array, Array]:
    n = x.shape[-1]
    if n % 2:
        raise DimensionError("state must have even length 2d")
    return x[..., : n // 2], x[..., n // 2 :]


# ---------------------------------------------------------------------------
# inner map and derivatives


def psi(config: ModelConfig, u: Array, v: Array) -> Array:
    """Coordinatewise quadratic inner map."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise DimensionError("u and v must have the same length")
    return (
        config.q11 * u * u
        + 2.0 * config.q12 * u * v
        + config.q22 * v * v
        + config.l1 * u
        + config.l2 * v
        + config.c
    )


def grad_psi(config: ModelConfig, u: Array, v: Array) -> tuple[Array, Array]:
    """Diagonals of the Jacobian blocks (d psi/d u, d psi/d v)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise DimensionError("u and v must have the same length")
    du = 2.0 * config.q11 * u + 2.0 * config.q12 * v + config.l1
    dv = 2.0 * config.q12 * u + 2.0 * config.q22 * v + config.l2
    return du, dv


# ---------------------------------------------------------------------------
# summary matrices, risk, noise, curvature


def stacked_w(config: ModelConfig, instance: ProblemInstance, x: Array) -> Array:
    """W(x) = [psi(x) | beta* | 1] in R^{d x 3}."""
    u, v = split_x(x)
    return np.column_stack(
        [psi(config, u, v), instance.beta_star, np.ones(instance.d)]
    )


def summary_b(config: ModelConfig, instance: ProblemInstance, x: Array) -> Array:
    """B(x) = W^T K W / d, the covariance of W^T a / sqrt(d)."""
    W = stacked_w(config, instance, x)
    if instance.is_diagonal:
        return (W.T * instance.k_diag) @ W / instance.d
    return W.T @ instance.k_full @ W / instance.d


def risk(config: ModelConfig, instance: ProblemInstance, x: Array) -> float:
    """(s/d) * (psi(x) - beta*)^T K (psi(x) - beta*)."""
    u, v = split_x(x)
    resid = psi(config, u, v) - instance.beta_star
    return float(
        config.loss_scale * resid @ instance.apply_k(resid) / instance.d
    )


def noise_coeff(config: ModelConfig, instance: ProblemInstance, x: Array) -> float:
    """I(B) = E[(d f/d r1)^2] = 4s * risk."""
    return 4.0 * config.loss_scale * risk(config, instance, x)


def grad_risk(config: ModelConfig, instance: ProblemInstance, x: Array) -> Array:
    """Analytic full gradient (2s/d) * (grad psi)^T K (psi - beta*)."""
    u, v = split_x(x)
    resid = psi(config, u, v) - instance.beta_star
    kr = instance.apply_k(resid)
    du, dv = grad_psi(config, u, v)
    scale = 2.0 * config.loss_scale / instance.d
    return scale * np.concatenate([du * kr, dv * kr])


def hessian_trace(config: ModelConfig, instance: ProblemInstance, x: Array) -> float:
    """Scaled Hessian-trace curvature statistic for the MSE loss.

    First term carries the fixed 1/d normalization; the boundary term scales
    with the loss scale (4s/d) so that the s=1/2 case is the textbook trace
    of the risk Hessian.
    """
    u, v = split_x(x)
    du, dv = grad_psi(config, u, v)
    kd = instance.k_diag if instance.is_diagonal else np.diag(instance.k_full)
    first = float(np.sum(kd * (du * du + dv * dv)) / instance.d)
    resid = psi(config, u, v) - instance.beta_star
    boundary = (
        4.0
        * config.loss_scale
        * (config.q11 + config.q22)
        * float(np.sum(kd * resid))
        / instance.d
    )
    return first + boundary


# ---------------------------------------------------------------------------
# composite statistics


@dataclass(frozen=True)
class StatisticSpec:
    """A single admissible statistic g(W^T q1(diag u) q2(diag v) q4(K) W / d).

    Polynomials are coefficient arrays, low order first.
    """

    name: str
    g: Callable[[Array], float]
    q1: tuple = (1.0,)
    q2: tuple = (1.0,)
    q4: tuple = (1.0,)

    def degrees(self) -> tuple[int, int, int]:
        return (len(self.q1) - 1, len(self.q2) - 1, len(self.q4) - 1)


@dataclass(frozen=True)
class CompositeStatistic:
    """Affine combination of statistic specs sharing one name.

    Evaluates to sum_j coef_j * g_j(M_j); the single-term case is exactly
    the admissible class, and the curvature preset needs the sum because its
    polynomial weight mixes u- and v-monomials.
    """

    name: str
    terms: tuple  # of (coef, StatisticSpec)


def _polyval(coeffs, z):
    return np.polynomial.polynomial.polyval(z, np.asarray(coeffs, dtype=float))


def weighted_summary(
    spec: StatisticSpec, config: ModelConfig, instance: ProblemInstance, x: Array
) -> Array:
    """M = W^T q1(diag u) q2(diag v) q4(K) W / d in one coordinate sweep."""
    if max(spec.degrees()) > 8:
        raise ParameterError("statistic polynomials capped at degree 8")
    if not instance.is_diagonal:
        # full covariance: only K-polynomial weights commute with everything
        if len(spec.q1) > 1 or len(spec.q2) > 1:
            raise ParameterError(
                "u/v-weighted statistics require a diagonal covariance"
            )
        W = stacked_w(config, instance, x)
        q4k = np.zeros_like(instance.k_full)
        power = np.eye(instance.d)
        for coef in spec.q4:
            q4k += coef * power
            power = power @ instance.k_full
        scale = float(spec.q1[0]) * float(spec.q2[0])
        M = scale * W.T @ q4k @ W / instance.d
        if not np.all(np.isfinite(M)):
            raise NumericalOverflowError(f"statistic {spec.name!r} overflowed")
        return M
    u, v = split_x(x)
    with np.errstate(over="ignore", invalid="ignore"):
        W = stacked_w(config, instance, x)
        wgt = (
            _polyval(spec.q1, u)
            * _polyval(spec.q2, v)
            * _polyval(spec.q4, instance.k_diag)
        )
        contrib = W * wgt[:, None]
    if not np.all(np.isfinite(contrib)):
        bad = int(np.argwhere(~np.isfinite(contrib))[0][0])
        raise NumericalOverflowError(
            f"statistic {spec.name!r} overflowed at coordinate {bad}", coordinate=bad
        )
    return contrib.T @ W / instance.d


def eval_statistic(
    spec: StatisticSpec, config: ModelConfig, instance: ProblemInstance, x: Array
) -> float:
    """Evaluate one admissible statistic at the iterate x."""
    return float(spec.g(weighted_summary(spec, config, instance, x)))


def eval_composite(
    stat: CompositeStatistic, config: ModelConfig, instance: ProblemInstance, x: Array
) -> float:
    return float(
        sum(c * eval_statistic(s, config, instance, x) for c, s in stat.terms)
    )


# preset statistic builders -------------------------------------------------

_Z = (0.0, 1.0)  # the identity polynomial q(z) = z
_ONE = (1.0,)


def _risk_g(s):
    return lambda B: s * (B[0, 0] - B[0, 1] - B[1, 0] + B[1, 1])


def _curvature_monomials(config: ModelConfig):
    """Monomial coefficients of (d_u psi)^2 + (d_v psi)^2 as {(a,b): coef}."""
    a1, b1, c1 = 2 * config.q11, 2 * config.q12, config.l1
    a2, b2, c2 = 2 * config.q12, 2 * config.q22, config.l2
    mono = {}

    def add(a, b, coef):
        if coef:
            mono[(a, b)] = mono.get((a, b), 0.0) + coef

    for (au, bv, const) in [(a1, b1, c1), (a2, b2, c2)]:
        add(2, 0, au * au)
        add(0, 2, bv * bv)
        add(1, 1, 2 * au * bv)
        add(1, 0, 2 * au * const)
        add(0, 1, 2 * bv * const)
        add(0, 0, const * const)
    return mono


def _mono_poly(degree: int) -> tuple:
    return tuple([0.0] * degree + [1.0])


def statistic_preset(name: str, config: ModelConfig) -> CompositeStatistic:
    """Registered statistic presets: risk, noise_coeff, hessian_trace,
    psi_norm2, error_norm2."""
    s = config.loss_scale
    if name == "risk":
        return CompositeStatistic(
            name, ((1.0, StatisticSpec("risk", _risk_g(s), q4=_Z)),)
        )
    if name == "noise_coeff":
        return CompositeStatistic(
            name, ((4.0 * s, StatisticSpec("risk", _risk_g(s), q4=_Z)),)
        )
    if name == "psi_norm2":
        return CompositeStatistic(
            name, ((1.0, StatisticSpec(name, lambda B: B[0, 0])),)
        )
    if name == "error_norm2":
        return CompositeStatistic(
            name,
            ((1.0, StatisticSpec(name, lambda B: B[0, 0] - 2 * B[0, 1] + B[1, 1])),),
        )
    if name == "hessian_trace":
        terms = []
        for (a, b), coef in sorted(_curvature_monomials(config).items()):
            spec = StatisticSpec(
                f"curv_u{a}v{b}",
                lambda B: B[2, 2],
                q1=_mono_poly(a),
                q2=_mono_poly(b),
                q4=_Z,
            )
            terms.append((coef, spec))
        boundary = 4.0 * s * (config.q11 + config.q22)
        if boundary:
            terms.append(
                (boundary, StatisticSpec("curv_bnd", lambda B: B[0, 2] - B[1, 2], q4=_Z))
            )
        return CompositeStatistic(name, tuple(terms))
    raise ParameterError(f"unknown statistic preset {name!r}")


PRESET_STATISTICS = ("risk", "noise_coeff", "hessian_trace", "psi_norm2", "error_norm2")
