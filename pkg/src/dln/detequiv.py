"""Deterministic high-dimensional limit curves via two independent backends.

The limit is described by a matrix field S(t, z) on the product contour.
Backend one ("meanfield") discretizes the limit law directly: within each
group of coordinates sharing (beta*, K, u0, v0), the coordinates are
exchangeable and follow the coordinatewise homogenized SDE whose scalar
coefficients (risk, noise) are recomputed from ensemble averages each
step.  Backend two ("contour_pde") integrates the closed evolution
equation for the field itself on the (z1, z2) grid, with the static z3,
z4 resolvents handled analytically per group.

The right-hand side of the field equation is a fixed sum of terms of the
form  coef * W^T p(U, V) K R(z1;U)^rho1 R(z2;V)^rho2 R(z3;B*) R(z4;K) W / d,
reconstructed from the field alone:  inserting a monomial u^m against a
simple pole is multiplication by z1^m minus contour moments, and extra
resolvent powers are -d/dz1 and (1/2) d^2/dz1^2.  The term list comes from
the Ito expansion of the field along the homogenized dynamics; it is
validated against a direct finite-dimensional evaluation in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AlignmentError,
    ContourViolationError,
    ParameterError,
    ResolutionError,
)
from .model import CompositeStatistic, ModelConfig, ProblemInstance
from .resolvent import (
    ContourSpec,
    GroupField,
    SField,
    build_contour,
    circle_derivative,
    circle_integral,
    circle_moment,
    fourier_tail_fraction,
    recover_B,
    recover_composite,
)
from .spectra import stream
from .trajectory import default_grid, resolve_statistics

Array = np.ndarray

_E13 = np.zeros((3, 3)); _E13[0, 2] = 1.0
_E31 = np.zeros((3, 3)); _E31[2, 0] = 1.0
_E21 = np.zeros((3, 3)); _E21[1, 0] = 1.0


# ---------------------------------------------------------------------------
# instance law


@dataclass(frozen=True)
class LawGroup:
    weight: float
    b: float
    kappa: float
    u0: float
    v0: float


@dataclass(frozen=True)
class InstanceLaw:
    """Finitely many (beta*, K, u0, v0) groups with weights summing to 1."""

    groups: tuple
    gamma: object

    def __post_init__(self):
        total = sum(g.weight for g in self.groups)
        if abs(total - 1.0) > 1e-12:
            raise ParameterError(f"group weights sum to {total}, expected 1")

    @staticmethod
    def from_instance(instance: ProblemInstance) -> "InstanceLaw":
        if not instance.is_diagonal:
            raise ParameterError("deterministic limits require a diagonal covariance")
        cols = np.stack(
            [instance.beta_star, instance.k_diag, instance.u0, instance.v0], axis=1
        )
        vals, counts = np.unique(cols, axis=0, return_counts=True)
        groups = tuple(
            LawGroup(weight=c / instance.d, b=row[0], kappa=row[1], u0=row[2], v0=row[3])
            for row, c in zip(vals, counts)
        )
        return InstanceLaw(groups=groups, gamma=instance.gamma)

    @property
    def beta_values(self) -> Array:
        return np.array([g.b for g in self.groups])

    @property
    def kappa_values(self) -> Array:
        return np.array([g.kappa for g in self.groups])

    @property
    def x0_inf_norm(self) -> float:
        return max(max(abs(g.u0), abs(g.v0)) for g in self.groups)


def _gamma_fn(gamma):
    if callable(gamma):
        return gamma
    g = float(gamma)
    return lambda t: g


# ---------------------------------------------------------------------------
# deterministic curve container


@dataclass
class DeterministicCurve:
    times: Array
    b_series: Array  # (n, 3, 3)
    stats: dict
    backend: str
    diagnostics: dict = field(default_factory=dict)

    def risk(self) -> Array:
        return self.stats["risk"]


def _psi_scalars(config: ModelConfig, u: Array, v: Array) -> Array:
    return (
        config.q11 * u * u
        + 2.0 * config.q12 * u * v
        + config.q22 * v * v
        + config.l1 * u
        + config.l2 * v
        + config.c
    )


def _group_moment_matrix(b, mq, mqp, mqp2):
    """E[q1 q2 * w w^T] from the moments of q := q1(U) q2(V)."""
    return np.array(
        [
            [mqp2, b * mqp, mqp],
            [b * mqp, b * b * mq, b * mq],
            [mqp, b * mq, mq],
        ]
    )


# ---------------------------------------------------------------------------
# mean-field (particle) backend


def solve_mean_field(
    config: ModelConfig,
    law: InstanceLaw,
    horizon: float,
    n_particles: int = 200_000,
    dt: float = 2.0**-8,
    seed: int = 0,
    record_grid: Array | None = None,
    stats=("risk",),
) -> DeterministicCurve:
    """Evolve antithetic particle ensembles per group under the
    coordinatewise homogenized SDE with self-consistent coefficients."""
    if horizon <= 0:
        raise ParameterError("horizon must be positive")
    if n_particles < 2 or n_particles % 2:
        raise ParameterError("n_particles must be a positive even number")
    grid = default_grid(horizon) if record_grid is None else np.asarray(record_grid, float)
    statistics = resolve_statistics(stats, config)
    gamma_fn = _gamma_fn(law.gamma)
    rng = stream(seed, 7)
    s = config.loss_scale
    half = n_particles // 2

    groups = law.groups
    U = [np.full(n_particles, g.u0) for g in groups]
    V = [np.full(n_particles, g.v0) for g in groups]

    def b_matrix():
        acc = np.zeros((3, 3))
        for g, u, v in zip(groups, U, V):
            p = _psi_scalars(config, u, v)
            acc += (
                g.weight
                * g.kappa
                * _group_moment_matrix(g.b, 1.0, float(p.mean()), float((p * p).mean()))
            )
        return acc

    def eval_stats():
        out = {}
        for stat in statistics:
            val = 0.0
            for coef, spec in stat.terms:
                m = np.zeros((3, 3))
                for g, u, v in zip(groups, U, V):
                    q = np.polynomial.polynomial.polyval(u, np.asarray(spec.q1)) * \
                        np.polynomial.polynomial.polyval(v, np.asarray(spec.q2))
                    q4k = float(np.polynomial.polynomial.polyval(g.kappa, np.asarray(spec.q4)))
                    p = _psi_scalars(config, u, v)
                    m += g.weight * q4k * _group_moment_matrix(
                        g.b, float(q.mean()), float((q * p).mean()), float((q * p * p).mean())
                    )
                val += coef * spec.g(m)
            out[stat.name] = float(val)
        return out

    def risk_band():
        var = 0.0
        for g, u, v in zip(groups, U, V):
            p = _psi_scalars(config, u, v)
            contrib = (p - g.b) ** 2
            pair_avg = 0.5 * (contrib[:half] + contrib[half:])
            var += (g.weight * g.kappa * s) ** 2 * pair_avg.var() / half
        return float(np.sqrt(var))

    n_steps = int(np.floor(horizon / dt + 1e-9))
    record_steps = np.minimum(np.floor(grid / dt + 1e-9).astype(int), n_steps)
    b_out = np.empty((len(grid), 3, 3))
    stat_out = {st.name: np.empty(len(grid)) for st in statistics}
    bands = np.empty(len(grid))

    sqrt_dt = np.sqrt(dt)
    step = 0
    j = 0
    while j < len(grid):
        while step < record_steps[j]:
            B = b_matrix()
            risk_val = config.h_of_B(B)
            icoef = config.I_of_B(B)
            dh = config.dh_first_column(B)
            gamma_t = gamma_fn(step * dt)
            amp = gamma_t * np.sqrt(max(icoef, 0.0)) * sqrt_dt
            for gi, g in enumerate(groups):
                u, v = U[gi], V[gi]
                xi_half = rng.standard_normal(half)
                xi = np.concatenate([xi_half, -xi_half])
                p = _psi_scalars(config, u, v)
                du = 2.0 * config.q11 * u + 2.0 * config.q12 * v + config.l1
                dv = 2.0 * config.q12 * u + 2.0 * config.q22 * v + config.l2
                # d * grad R per coordinate with ensemble coefficients
                factor = 2.0 * g.kappa * (dh[0] * p + dh[1] * g.b + dh[2])
                shock = amp * np.sqrt(g.kappa) * xi
                U[gi] = u - gamma_t * du * factor * dt + shock * du
                V[gi] = v - gamma_t * dv * factor * dt + shock * dv
            step += 1
        B = b_matrix()
        b_out[j] = B
        for name, val in eval_stats().items():
            stat_out[name][j] = val
        bands[j] = risk_band()
        j += 1

    diag = {
        "n_particles": n_particles,
        "dt": dt,
        "steps": n_steps,
        "mc_band": float(np.max(bands)),
        "mc_band_series": bands,
        "antithetic": True,
    }
    _attach_invariant_stats(stat_out, b_out, config)
    return DeterministicCurve(
        times=grid, b_series=b_out, stats=stat_out, backend="meanfield", diagnostics=diag
    )


def _attach_invariant_stats(stat_out: dict, b_series: Array, config: ModelConfig):
    """Risk and noise-coefficient curves are functions of B by definition."""
    risk = np.array([config.h_of_B(B) for B in b_series])
    stat_out["risk"] = risk
    stat_out["noise_coeff"] = 4.0 * config.loss_scale * risk


# ---------------------------------------------------------------------------
# contour-PDE backend: polynomial helpers


def _p2_mul(a: Array, b: Array) -> Array:
    """Product of bivariate coefficient arrays c[i, j] <-> u^i v^j."""
    out = np.zeros((a.shape[0] + b.shape[0] - 1, a.shape[1] + b.shape[1] - 1))
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            if a[i, j]:
                out[i : i + b.shape[0], j : j + b.shape[1]] += a[i, j] * b
    return out


def _model_polys(config: ModelConfig):
    """Coefficient arrays of d_u psi, d_v psi, and psi in (u, v)."""
    pu = np.zeros((2, 2))
    pu[1, 0] = 2.0 * config.q11
    pu[0, 1] = 2.0 * config.q12
    pu[0, 0] = config.l1
    pv = np.zeros((2, 2))
    pv[1, 0] = 2.0 * config.q12
    pv[0, 1] = 2.0 * config.q22
    pv[0, 0] = config.l2
    pp = np.zeros((3, 3))
    pp[2, 0] = config.q11
    pp[1, 1] = 2.0 * config.q12
    pp[0, 2] = config.q22
    pp[1, 0] = config.l1
    pp[0, 1] = config.l2
    pp[0, 0] = config.c
    return pu, pv, pp


class FieldCalculus:
    """Closure operators on stacked group fields of shape (G, 3, 3, n1, n2).

    Monomial insertion against the simple-pole axes plus resolvent-power
    raising via spectral z-derivatives; all operators act independently on
    the two circle axes (axis 3 for z1, axis 4 for z2).
    """

    AX1, AX2 = 3, 4

    def __init__(self, z1: Array, z2: Array):
        self.z1 = z1
        self.z2 = z2
        self.z1b = z1.reshape(1, 1, 1, -1, 1)
        self.z2b = z2.reshape(1, 1, 1, 1, -1)

    def monomial_bases_z2(self, F: Array, max_deg: int):
        """G_b = field of v^b/(z2 - v) structure, for b = 0..max_deg."""
        bases = [F]
        for b in range(1, max_deg + 1):
            base = (self.z2b**b) * F
            for j in range(b):
                mom = circle_moment(F, self.z2, self.AX2, b - 1 - j)
                base = base - (self.z2b**j) * np.expand_dims(mom, self.AX2)
            bases.append(base)
        return bases

    def apply_poly_z1(self, F: Array, coeffs: Array) -> Array:
        """Insert sum_a coeffs[a] u^a against the z1 pole (rho1 = 1)."""
        deg = len(coeffs) - 1
        while deg > 0 and coeffs[deg] == 0:
            deg -= 1
        qz = np.polynomial.polynomial.polyval(self.z1, np.asarray(coeffs[: deg + 1]))
        out = qz.reshape(1, 1, 1, -1, 1) * F
        if deg > 0:
            moments = [circle_moment(F, self.z1, self.AX1, p) for p in range(deg)]
            for j in range(deg):
                mj = sum(coeffs[a] * moments[a - 1 - j] for a in range(j + 1, deg + 1))
                out = out - (self.z1b**j) * np.expand_dims(mj, self.AX1)
        return out

    def insert(self, bases_z2, coef2d: Array) -> Array:
        """Field of p(u, v)/((z1-u)(z2-v)) from the plain field's z2 bases."""
        out = None
        for b in range(coef2d.shape[1]):
            col = coef2d[:, b]
            if not np.any(col):
                continue
            term = self.apply_poly_z1(bases_z2[b], col)
            out = term if out is None else out + term
        if out is None:
            out = np.zeros_like(bases_z2[0])
        return out

    def raise_power(self, F: Array, rho1: int, rho2: int) -> Array:
        """Extra resolvent powers: R^2 = -d/dz R, R^3 = (1/2) d^2/dz^2 R."""
        out = F
        if rho1 >= 2:
            d1 = circle_derivative(out, self.z1, self.AX1)
            out = -d1 if rho1 == 2 else 0.5 * circle_derivative(d1, self.z1, self.AX1)
        if rho2 >= 2:
            d2 = circle_derivative(out, self.z2, self.AX2)
            out = -d2 if rho2 == 2 else 0.5 * circle_derivative(d2, self.z2, self.AX2)
        return out


def _lmul(mat: Array, F: Array) -> Array:
    """3x3 matrix times field on the observable axes (left product)."""
    return np.einsum("ab,gbcij->gacij", mat, F)


def _rmul(F: Array, mat: Array) -> Array:
    return np.einsum("gabij,bc->gacij", F, mat)


def field_rhs(
    F: Array,
    calc: FieldCalculus,
    config: ModelConfig,
    kappa: Array,
    beta: Array,
    gamma_t: float,
) -> tuple[Array, Array]:
    """Time derivative of the stacked group fields and the current B matrix.

    Gradient part (prefactor -2 gamma) and Ito-correction part (prefactor
    gamma^2/2 * I(B)); each term is one closure insertion.  kappa and beta
    are per-group (K, beta*) values; every term carries one extra K factor.
    """
    G = F.shape[0]
    kap = kappa.reshape(G, 1, 1, 1, 1)
    bet = beta.reshape(G, 1, 1, 1, 1)

    # current summary matrix: z3 residue 1, z4 residue of z4/(z4-k) is kappa
    ints = circle_integral(circle_integral(F, calc.z2, calc.AX2), calc.z1, 3)
    B = np.sum(kappa.reshape(G, 1, 1) * ints, axis=0)
    B_real = np.real(B)
    icoef = config.I_of_B(B_real)
    dh = config.dh_first_column(B_real)
    H = np.zeros((3, 3))
    H[:, 0] = dh

    pu, pv, pp = _model_polys(config)
    pu2 = _p2_mul(pu, pu)
    pv2 = _p2_mul(pv, pv)

    bases = calc.monomial_bases_z2(F, 4)

    def T(poly, rho1, rho2):
        return calc.raise_power(calc.insert(bases, poly), rho1, rho2)

    # gradient terms (u side)
    A_u = kap * T(pu2, 1, 1)
    B_u = kap * T(_p2_mul(pu, pp), 2, 1)
    D_u = kap * T(pu, 2, 1)
    C_u = bet * D_u
    # gradient terms (v side)
    A_v = kap * T(pv2, 1, 1)
    B_v = kap * T(_p2_mul(pv, pp), 1, 2)
    D_v = kap * T(pv, 1, 2)
    C_v = bet * D_v

    Ht = H.T
    grad = (
        _lmul(Ht, A_u) + _rmul(A_u, H)
        + _lmul(Ht, B_u)
        + _lmul(_E21 @ Ht, C_u)
        + _lmul(_E31 @ Ht, D_u)
        + _lmul(Ht, A_v) + _rmul(A_v, H)
        + _lmul(Ht, B_v)
        + _lmul(_E21 @ Ht, C_v)
        + _lmul(_E31 @ Ht, D_v)
    )

    # Ito-correction terms
    G_u = kap * T(_p2_mul(pu2, pu), 2, 1)
    J_u = kap * T(_p2_mul(pu2, pu2), 1, 1)
    L_u = kap * T(pu2, 3, 1)
    G_v = kap * T(_p2_mul(pv2, pv), 1, 2)
    J_v = kap * T(_p2_mul(pv2, pv2), 1, 1)
    L_v = kap * T(pv2, 1, 3)
    M1 = kap * T(_p2_mul(pu, pv), 1, 1)
    M2 = kap * T(_p2_mul(pu, pv2), 2, 1)
    M3 = kap * T(_p2_mul(pu2, pv), 1, 2)
    M4 = kap * T(_p2_mul(pu2, pv2), 1, 1)
    M5 = kap * T(_p2_mul(pu, pv), 2, 2)

    huu = (
        2.0 * config.q11 * (_lmul(_E13, A_u) + _rmul(A_u, _E31))
        + 2.0 * (_lmul(_E13, G_u) + _rmul(G_u, _E31))
        + 2.0 * _rmul(_lmul(_E13, J_u), _E31)
        + 2.0 * L_u
    )
    hvv = (
        2.0 * config.q22 * (_lmul(_E13, A_v) + _rmul(A_v, _E31))
        + 2.0 * (_lmul(_E13, G_v) + _rmul(G_v, _E31))
        + 2.0 * _rmul(_lmul(_E13, J_v), _E31)
        + 2.0 * L_v
    )
    huv = (
        2.0 * config.q12 * (_lmul(_E13, M1) + _rmul(M1, _E31))
        + (_lmul(_E13, M2) + _rmul(M2, _E31))
        + (_lmul(_E13, M3) + _rmul(M3, _E31))
        + 2.0 * _rmul(_lmul(_E13, M4), _E31)
        + M5
    )

    rhs = -2.0 * gamma_t * grad + 0.5 * gamma_t**2 * icoef * (huu + 2.0 * huv + hvv)
    return rhs, B_real


def law_initial_field(law: InstanceLaw, config: ModelConfig, contour: ContourSpec) -> Array:
    """S(0, z) per group: weight * w0 w0^T / ((z1 - u0)(z2 - v0))."""
    z1 = contour.nodes(1)
    z2 = contour.nodes(2)
    G = len(law.groups)
    F = np.zeros((G, 3, 3, len(z1), len(z2)), dtype=complex)
    for gi, g in enumerate(law.groups):
        if max(abs(g.u0), abs(g.v0)) >= contour.r1 / 2.0:
            raise ParameterError("initialization outside the contour disc")
        p0 = float(_psi_scalars(config, np.array([g.u0]), np.array([g.v0]))[0])
        w0 = np.array([p0, g.b, 1.0])
        r1 = 1.0 / (z1 - g.u0)
        r2 = 1.0 / (z2 - g.v0)
        F[gi] = g.weight * np.einsum("a,b,i,j->abij", w0, w0, r1, r2)
    return F


def _field_to_sfield(F: Array, law: InstanceLaw, contour: ContourSpec) -> SField:
    groups = [
        GroupField(b=g.b, kappa=g.kappa, count=0, field=F[gi])
        for gi, g in enumerate(law.groups)
    ]
    return SField(contour=contour, d=0, groups=groups)


def _stieltjes_projector(n: int, k_keep: int) -> Array:
    """Per-axis mode mask: negative Laurent frequencies up to k_keep only.

    Exact on Stieltjes-type fields (which have no other modes); removes the
    off-cone directions in which the discretized closure is unstable.
    """
    k = np.fft.fftfreq(n, d=1.0 / n)
    return ((k < 0) & (-k <= k_keep)).astype(float)


def _project(F: Array, mask1: Array, mask2: Array) -> Array:
    fhat = np.fft.fft2(F, axes=(3, 4))
    fhat *= mask1.reshape(1, 1, 1, -1, 1) * mask2.reshape(1, 1, 1, 1, -1)
    return np.fft.ifft2(fhat, axes=(3, 4))


def _reduction_kind(config: ModelConfig) -> str:
    """Detect which one-dimensional reduction applies to the parametrization.

    For the in-scope parametrizations the coordinatewise limit dynamics
    collapses to one dimension because an invariant evolves
    deterministically: U V under the difference-of-squares map (the exact
    product identity), U^2 - V^2 under the Hadamard map, and V itself for
    the plain linear map.
    """
    key = (config.q11, config.q12, config.q22, config.l1, config.l2, config.c)
    if key == (1.0, 0.0, -1.0, 0.0, 0.0, 0.0):
        return "squared"
    if key == (0.0, 0.5, 0.0, 0.0, 0.0, 0.0):
        return "hadamard"
    if key == (0.0, 0.0, 0.0, 1.0, 0.0, 0.0):
        return "linear"
    raise ParameterError(
        "the quantile field solver covers the squared, hadamard, and linear "
        "parametrizations; use the mean-field backend for generic ones"
    )


class _GroupReduction:
    """Per-group coordinate maps and FP coefficients of the 1-d reduction.

    The reduced coordinate y carries the whole group law; the deterministic
    invariant (product or difference of squares) is a closed function of
    the accumulated noise integral J(t) = int I(s) ds.
    """

    def __init__(self, kind: str, group: LawGroup, s: float):
        self.kind = kind
        self.g = group
        self.s = s
        if kind == "squared":
            if group.u0 <= 0 or group.v0 <= 0:
                raise ParameterError(
                    "squared-parametrization reduction needs u0, v0 > 0"
                )
            self.y0 = float(np.log(group.u0 / group.v0))
            self.p0 = group.u0 * group.v0
        elif kind == "hadamard":
            self.y0 = group.u0 * group.v0
            self.c0 = group.u0**2 - group.v0**2
            self.psi_sign = 1.0 if group.u0 * group.v0 >= 0 else -1.0
            self.u_sign = 1.0 if group.u0 >= 0 else -1.0
        else:
            self.y0 = group.u0

    # deterministic invariant at noise integral J
    def invariant(self, J: float) -> float:
        g = self.g
        if self.kind == "squared":
            return self.p0 * np.exp(-4.0 * g.kappa * J)
        if self.kind == "hadamard":
            return self.c0 * np.exp(-g.kappa * J)
        return 0.0

    def psi(self, y: Array, inv: float) -> Array:
        if self.kind == "squared":
            return 2.0 * inv * np.sinh(y)
        return y  # hadamard: psi = y; linear: psi = u = y

    def uv(self, y: Array, inv: float) -> tuple:
        """Coordinate values (u, v) of the reduced state."""
        g = self.g
        if self.kind == "squared":
            root = np.sqrt(inv)
            return root * np.exp(0.5 * y), root * np.exp(-0.5 * y)
        if self.kind == "hadamard":
            if abs(inv) > 1e-300:
                ssum = np.sqrt(inv * inv + 4.0 * y * y)
                u2 = 0.5 * (ssum + inv) if inv > 0 else 0.5 * (ssum - (-inv))
                if inv > 0:
                    u = self.u_sign * np.sqrt(np.maximum(u2, 1e-300))
                    return u, y / u
                v2 = 0.5 * (ssum + (-inv))
                v = np.sqrt(np.maximum(v2, 1e-300)) * np.sign(self.g.v0 or 1.0)
                return y / v, v
            # u0^2 = v0^2: U = +-V pathwise, psi keeps its initial sign
            u = self.u_sign * np.sqrt(np.abs(y))
            with np.errstate(divide="ignore", invalid="ignore"):
                v = np.where(np.abs(u) > 0, y / np.where(u == 0, 1.0, u), 0.0)
            return u, v
        return y, np.full_like(y, self.g.v0)

    def drift(self, y: Array, inv: float, icoef: float, gamma_t: float) -> Array:
        g, s = self.g, self.s
        if self.kind == "squared":
            return -8.0 * s * gamma_t * g.kappa * (2.0 * inv * np.sinh(y) - g.b)
        if self.kind == "hadamard":
            ssum = np.sqrt(inv * inv + 4.0 * y * y)
            return (
                -2.0 * s * gamma_t * g.kappa * ssum * (y - g.b)
                + gamma_t**2 * icoef * g.kappa * y
            )
        return -2.0 * s * gamma_t * g.kappa * (y - g.b)

    def diffusion(self, y: Array, inv: float, icoef: float, gamma_t: float) -> Array:
        g = self.g
        if self.kind == "squared":
            return np.full_like(y, 8.0 * gamma_t**2 * icoef * g.kappa)
        if self.kind == "hadamard":
            return 0.5 * gamma_t**2 * icoef * g.kappa * (inv * inv + 4.0 * y * y)
        return np.full_like(y, 0.5 * gamma_t**2 * icoef * g.kappa)


def _implicit_diffuse(Q: Array, D_mid: Array, dt: float, dq: float) -> Array:
    """Backward-Euler step of dQ/dt = -d/dq [ D / (dQ/dq) ] by damped Newton.

    The quantile-transport diffusion is monotone but arbitrarily stiff when
    the density is near-atomic, so it is treated implicitly; the tridiagonal
    Newton system solves in a few iterations.  Zero-flux ends preserve mass
    and the mean.
    """
    from scipy.linalg import solve_banded

    n = len(Q)
    if np.all(D_mid <= 0.0):
        return Q
    d_edge = 0.5 * (D_mid[:-1] + D_mid[1:])
    target = Q.copy()
    Qn = Q.copy()
    lam = dt / dq
    for _ in range(40):
        gaps = np.diff(Qn)
        if np.any(gaps <= 0):
            raise ResolutionError("quantile gaps collapsed inside Newton")
        flux = d_edge * dq / gaps  # G at interior edges
        resid = Qn - target
        resid[:-1] += lam * flux  # Q_i picks +G_{i+1/2}
        resid[1:] -= lam * flux  # and -G_{i-1/2}
        if np.max(np.abs(resid)) <= 1e-12 * (1.0 + np.max(np.abs(Qn))):
            break
        w = lam * flux / gaps  # -d flux_e / d gap_e, positive
        lower = np.zeros(n)
        upper = np.zeros(n)
        diag = np.ones(n)
        diag[:-1] += w
        diag[1:] += w
        upper[1:] = -w  # coupling to Q_{i+1}
        lower[:-1] = -w
        band = np.vstack([upper, diag, lower])
        delta = solve_banded((1, 1), band, -resid)
        step_scale = 1.0
        while not np.all(np.diff(Qn + step_scale * delta) > 0):
            step_scale *= 0.5
            if step_scale < 1e-8:
                raise ResolutionError("implicit diffusion step lost monotonicity")
        Qn = Qn + step_scale * delta
    return Qn


def _solve_pde_quantile(
    config, law, horizon, contour, dt, grid, statistics, n_quantiles
):
    """Strang-split integrator for the reduced transport system.

    Advection of the quantiles is explicit (midpoint rule), diffusion is
    implicit, and the self-consistent scalars (B, I) are refreshed from the
    ensemble every substep.
    """
    from scipy.stats import norm as _norm

    s = config.loss_scale
    kind = _reduction_kind(config)
    reductions = [_GroupReduction(kind, g, s) for g in law.groups]
    gamma_fn = _gamma_fn(law.gamma)
    nq = n_quantiles
    dq = 1.0 / nq
    probs = (np.arange(nq) + 0.5) * dq
    gauss_q = _norm.ppf(probs)

    n_steps = int(np.floor(horizon / dt + 1e-9))
    record_steps = np.minimum(np.floor(grid / dt + 1e-9).astype(int), n_steps)
    b_out = np.empty((len(grid), 3, 3))
    stat_out = {st.name: np.empty(len(grid)) for st in statistics}

    def b_matrix(Qs, J):
        acc = np.zeros((3, 3))
        for red, g, Q in zip(reductions, law.groups, Qs):
            psi = red.psi(Q, red.invariant(J))
            acc += g.weight * g.kappa * _group_moment_matrix(
                g.b, 1.0, float(psi.mean()), float((psi * psi).mean())
            )
        return acc

    def noise_coef(Qs, J):
        return config.I_of_B(b_matrix(Qs, J))

    def advect(Qs, J, t, h):
        """Explicit midpoint step of dQ/dt = mu(Q, scalars).

        J accumulates gamma(t)^2 I(t), the clock of the deterministic
        invariants (product / difference of squares).
        """
        icoef = noise_coef(Qs, J)
        gamma_t = gamma_fn(t)
        mids = []
        for red, Q in zip(reductions, Qs):
            inv = red.invariant(J)
            mids.append(Q + 0.5 * h * red.drift(Q, inv, icoef, gamma_t))
        j_mid = J + 0.5 * h * gamma_t**2 * icoef
        icoef_mid = noise_coef(mids, j_mid)
        gamma_mid = gamma_fn(t + 0.5 * h)
        out = []
        for red, Q, Qm in zip(reductions, Qs, mids):
            inv = red.invariant(j_mid)
            out.append(Q + h * red.drift(Qm, inv, icoef_mid, gamma_mid))
        return out, J + h * gamma_mid**2 * icoef_mid

    def reconstruct_field(Qs, J):
        z1 = contour.nodes(1)
        z2 = contour.nodes(2)
        groups = []
        bound = contour.r1 / 2.0
        for red, g, Q in zip(reductions, law.groups, Qs):
            inv = red.invariant(J)
            u, v = red.uv(Q, inv)
            if max(np.max(np.abs(u)), np.max(np.abs(v))) >= bound:
                raise ContourViolationError(
                    "reduced-state support reached the contour disc; enlarge M"
                )
            psi = red.psi(Q, inv)
            w = np.column_stack([psi, np.full(nq, g.b), np.ones(nq)])
            r1 = 1.0 / (z1[:, None] - u[None, :])
            r2 = 1.0 / (z2[:, None] - v[None, :])
            field = g.weight * np.einsum("ca,cb,ic,jc->abij", w, w, r1, r2) / nq
            groups.append(GroupField(b=g.b, kappa=g.kappa, count=0, field=field))
        return SField(contour=contour, d=0, groups=groups)

    def record(j, Qs, J):
        sfield = reconstruct_field(Qs, J)
        B = recover_B(sfield)
        b_out[j] = B
        for st in statistics:
            stat_out[st.name][j] = recover_composite(st, sfield)

    # exact atomic state at t = 0; first step spreads it analytically
    Qs = [np.full(nq, red.y0) for red in reductions]
    J = 0.0
    step = 0
    started = False
    for j in range(len(grid)):
        while step < record_steps[j]:
            t = step * dt
            gamma_t = gamma_fn(t)
            if not started:
                icoef = noise_coef(Qs, J)
                new = []
                spread = False
                for red, Q in zip(reductions, Qs):
                    inv = red.invariant(J)
                    mu = red.drift(Q, inv, icoef, gamma_t)
                    dcoef = red.diffusion(Q, inv, icoef, gamma_t)
                    new.append(Q + mu * dt + np.sqrt(2.0 * dcoef * dt) * gauss_q)
                    spread = spread or bool(np.any(dcoef > 0))
                Qs = new
                J += gamma_t**2 * icoef * dt
                started = spread  # a frozen (gamma = 0 or zero-risk) law stays atomic
            else:
                Qs, J = advect(Qs, J, t, 0.5 * dt)
                icoef = noise_coef(Qs, J)
                diffused = []
                for red, Q in zip(reductions, Qs):
                    inv = red.invariant(J)
                    dcoef = red.diffusion(Q, inv, icoef, gamma_fn(t + 0.5 * dt))
                    diffused.append(_implicit_diffuse(Q, dcoef, dt, dq))
                Qs, J = advect(diffused, J, t + 0.5 * dt, 0.5 * dt)
            step += 1
            for Q in Qs:
                if not np.all(np.isfinite(Q)):
                    raise ResolutionError(
                        f"quantile transport lost finiteness at t={t + dt:.4g}"
                    )
        record(j, Qs, J)

    return b_out, stat_out, {"dt": dt, "steps": n_steps, "n_quantiles": nq}


def solve_contour_pde(
    config: ModelConfig,
    law: InstanceLaw,
    horizon: float,
    contour: ContourSpec,
    dt: float = 1e-3,
    record_grid: Array | None = None,
    stats=("risk",),
    alias_tol: float = 1e-6,
    method: str = "quantile",
    n_quantiles: int = 512,
) -> DeterministicCurve:
    """Deterministic field solver; curves recovered through the contour.

    ``method="quantile"`` (default) integrates the limit system in its
    well-posed coordinates: per group the law is one-dimensional (an exact
    invariant evolves deterministically), and its Fokker-Planck equation is
    advanced with RK4 in mass/quantile form, which adapts automatically as
    the density concentrates.  At every output time the contour field is
    reconstructed and B and all statistics are recovered by the Cauchy
    machinery.

    ``method="spectral"`` integrates the field equation directly on the
    (z1, z2) grid with angular spectral differentiation and trapezoid
    contour operators.  That form is validated against finite-dimensional
    oracles, but off the Stieltjes cone its discretization grows like
    exp(c k^2 t), so it is restricted to short horizons; audits abort the
    run when the growth reaches the retained band.
    """
    if horizon <= 0:
        raise ParameterError("horizon must be positive")
    grid = default_grid(horizon) if record_grid is None else np.asarray(record_grid, float)
    statistics = resolve_statistics(stats, config)
    if method == "quantile":
        b_out, stat_out, diag = _solve_pde_quantile(
            config, law, horizon, contour, dt, grid, statistics, n_quantiles
        )
        diag["method"] = "quantile"
        diag["nodes"] = (contour.n1, contour.n2)
        _attach_invariant_stats(stat_out, b_out, config)
        return DeterministicCurve(
            times=grid, b_series=b_out, stats=stat_out,
            backend="contour_pde", diagnostics=diag,
        )
    if method != "spectral":
        raise ParameterError(f"unknown method {method!r}")

    gamma_fn = _gamma_fn(law.gamma)
    z1 = contour.nodes(1)
    z2 = contour.nodes(2)
    calc = FieldCalculus(z1, z2)
    k_keep = min(len(z1), len(z2)) // 2 - 1
    mask1 = _stieltjes_projector(len(z1), k_keep)
    mask2 = _stieltjes_projector(len(z2), k_keep)
    kappa = law.kappa_values
    beta = law.beta_values
    F = _project(law_initial_field(law, config, contour), mask1, mask2)

    n_steps = int(np.floor(horizon / dt + 1e-9))
    record_steps = np.minimum(np.floor(grid / dt + 1e-9).astype(int), n_steps)
    b_out = np.empty((len(grid), 3, 3))
    stat_out = {st.name: np.empty(len(grid)) for st in statistics}
    max_imag = 0.0

    def deriv(Fc, t):
        rhs, _ = field_rhs(Fc, calc, config, kappa, beta, gamma_fn(t))
        return _project(rhs, mask1, mask2)

    step = 0
    for j in range(len(grid)):
        while step < record_steps[j]:
            t = step * dt
            k1 = deriv(F, t)
            k2 = deriv(F + 0.5 * dt * k1, t + 0.5 * dt)
            k3 = deriv(F + 0.5 * dt * k2, t + 0.5 * dt)
            k4 = deriv(F + dt * k3, t + dt)
            F = F + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            step += 1
            if not np.all(np.isfinite(F)):
                raise ResolutionError(
                    f"field integrator lost finiteness at t={t + dt:.4g}; "
                    "reduce dt or enlarge the contour"
                )
        tail = max(fourier_tail_fraction(F, 3), fourier_tail_fraction(F, 4))
        if tail > alias_tol:
            raise ResolutionError(
                f"top-quarter Fourier mass {tail:.2e} at t={grid[j]:.3g}; "
                "increase the contour node count N"
            )
        sfield = _field_to_sfield(F, law, contour)
        ints = circle_integral(circle_integral(F, z2, 4), z1, 3)
        B = np.sum(kappa.reshape(-1, 1, 1) * ints, axis=0)
        max_imag = max(max_imag, float(np.max(np.abs(B.imag))))
        b_out[j] = B.real
        for st in statistics:
            stat_out[st.name][j] = recover_composite(st, sfield)

    diag = {
        "dt": dt,
        "steps": n_steps,
        "max_b_imag": max_imag,
        "nodes": (contour.n1, contour.n2),
        "method": method,
        "k_keep": k_keep,
    }
    _attach_invariant_stats(stat_out, b_out, config)
    return DeterministicCurve(
        times=grid, b_series=b_out, stats=stat_out, backend="contour_pde", diagnostics=diag
    )


def default_law_contour(law: InstanceLaw, M: float, nodes: int = 64) -> ContourSpec:
    return build_contour(M, law.beta_values, law.kappa_values, nodes=nodes)


# ---------------------------------------------------------------------------
# concentration report


def concentration_report(trajs_by_d: dict, curve: DeterministicCurve) -> dict:
    """Per-run sup-deviation from the deterministic curve, summarized per
    dimension and statistic with median and 10/90 quantiles."""
    table = {}
    for d, records in sorted(trajs_by_d.items()):
        for rec in records:
            if len(rec.times) != len(curve.times) or not np.allclose(
                rec.times, curve.times
            ):
                raise AlignmentError("trajectory and curve grids differ")
        for name, ref in curve.stats.items():
            sups = []
            for rec in records:
                if name not in rec.stats:
                    raise AlignmentError(f"statistic {name!r} missing from run")
                sups.append(float(np.max(np.abs(rec.stats[name] - ref))))
            sups = np.array(sups)
            table[(d, name)] = {
                "median": float(np.median(sups)),
                "q10": float(np.quantile(sups, 0.10)),
                "q90": float(np.quantile(sups, 0.90)),
                "runs": len(sups),
            }
    return table


def deviation_slope(table: dict, statistic: str = "risk") -> float:
    """Least-squares slope of log(median sup-deviation) against log d."""
    ds = sorted({d for (d, name) in table if name == statistic})
    if len(ds) < 2:
        raise ParameterError("need at least two dimensions for a slope")
    logs_d = np.log([d for d in ds])
    logs_m = np.log([table[(d, statistic)]["median"] for d in ds])
    slope = np.polyfit(logs_d, logs_m, 1)[0]
    return float(slope)
