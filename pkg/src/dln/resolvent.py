"""Product contour, multi-resolvent statistic field, and Cauchy recovery.

S(x, z) = W^T R(z1; diag u) R(z2; diag v) R(z3; diag beta*) R(z4; K) W / d
on the product of four circles.  The z3 and z4 resolvents never change
along a trajectory, so the field is stored per group of coordinates
sharing an exact (beta*_i, K_ii) value, with those two factors kept
analytic; only (z1, z2) is gridded.  A dense four-circle path exists for
tiny d as a cross-check.

Contour integrals use the positively oriented z(theta) = r e^{i theta},
dz = i z dtheta, so (1/(2 pi))^4 times the four dz integrals recovers
residues (i^4 = 1).  The periodic trapezoid rule on a circle is
geometrically accurate: (1/2pi i) contour integral of f dz = mean_j z_j f(z_j).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContourViolationError, ParameterError, QuadratureFailureError
from .model import CompositeStatistic, ModelConfig, ProblemInstance, StatisticSpec, psi, split_x

Array = np.ndarray

DEFAULT_NODES = 100


# ---------------------------------------------------------------------------
# circle calculus


def circle_nodes(radius: float, n: int) -> Array:
    """n equispaced nodes on |z| = radius; max gap is 2 pi r / n."""
    theta = 2.0 * np.pi * np.arange(n) / n
    return radius * np.exp(1j * theta)


def circle_integral(values: Array, z: Array, axis: int) -> Array:
    """(1/2 pi i) contour integral along one circle axis by trapezoid."""
    shape = [1] * values.ndim
    shape[axis] = len(z)
    return np.mean(values * z.reshape(shape), axis=axis)


def circle_moment(values: Array, z: Array, axis: int, power: int) -> Array:
    """(1/2 pi i) contour integral of w^power F(w) dw along the given axis."""
    shape = [1] * values.ndim
    shape[axis] = len(z)
    return np.mean(values * (z ** (power + 1)).reshape(shape), axis=axis)


def circle_derivative(values: Array, z: Array, axis: int) -> Array:
    """d/dz by angular spectral differentiation: dF/dz = (dF/dtheta) / (iz)."""
    n = len(z)
    k = np.fft.fftfreq(n, d=1.0 / n)
    if n % 2 == 0:
        k = k.copy()
        k[n // 2] = 0.0  # drop the Nyquist mode
    fhat = np.fft.fft(values, axis=axis)
    shape = [1] * values.ndim
    shape[axis] = n
    dtheta = np.fft.ifft(1j * k.reshape(shape) * fhat, axis=axis)
    return dtheta / (1j * z.reshape(shape))


def fourier_tail_fraction(values: Array, axis: int) -> float:
    """Mass in the top quarter of |frequencies| relative to the total."""
    fhat = np.fft.fft(values, axis=axis)
    n = values.shape[axis]
    k = np.abs(np.fft.fftfreq(n, d=1.0 / n))
    mask = k >= n // 4
    shape = [1] * values.ndim
    shape[axis] = n
    power = np.abs(fhat) ** 2
    total = float(np.sum(power))
    if total == 0.0:
        return 0.0
    return float(np.sum(power * mask.reshape(shape))) / total


# ---------------------------------------------------------------------------
# contour construction


@dataclass(frozen=True)
class ContourSpec:
    """Four circle radii and per-circle node counts; M records the iterate
    bound that sized the first two radii."""

    r1: float
    r2: float
    r3: float
    r4: float
    n1: int = DEFAULT_NODES
    n2: int = DEFAULT_NODES
    n3: int = DEFAULT_NODES
    n4: int = DEFAULT_NODES
    M: float = 0.0

    def nodes(self, i: int) -> Array:
        r = (self.r1, self.r2, self.r3, self.r4)[i - 1]
        n = (self.n1, self.n2, self.n3, self.n4)[i - 1]
        return circle_nodes(r, n)

    def to_dict(self) -> dict:
        return {
            "r": [self.r1, self.r2, self.r3, self.r4],
            "n": [self.n1, self.n2, self.n3, self.n4],
            "M": self.M,
        }


def build_contour(
    M: float, beta_star: Array, k_entries: Array, nodes: int = DEFAULT_NODES
) -> ContourSpec:
    """radii: r1 = r2 = 2M, r3 = max(1, 2||beta*||_inf), r4 = max(1, 2||K||op)."""
    if M <= 0:
        raise ParameterError("contour bound M must be positive")
    k_entries = np.asarray(k_entries, dtype=float)
    k_op = (
        float(np.max(np.abs(k_entries)))
        if k_entries.ndim == 1
        else float(np.linalg.norm(k_entries, 2))
    )
    beta_inf = float(np.max(np.abs(beta_star)))
    return ContourSpec(
        r1=2.0 * M,
        r2=2.0 * M,
        r3=max(1.0, 2.0 * beta_inf),
        r4=max(1.0, 2.0 * k_op),
        n1=nodes,
        n2=nodes,
        n3=nodes,
        n4=nodes,
        M=M,
    )


# ---------------------------------------------------------------------------
# group-factored field


@dataclass
class GroupField:
    """(z1, z2)-field of one (beta*, K)-value group, z3/z4 kept analytic.

    field[a, b, i, j] = (1/d) sum_{coords in group} w w^T
                        / ((z1_i - u)(z2_j - v)).
    """

    b: float
    kappa: float
    count: int
    field: Array  # complex (3, 3, n1, n2)


@dataclass
class SField:
    """Group-factored evaluation of S(x, .) on the contour grid."""

    contour: ContourSpec
    d: int
    groups: list

    def total(self, z3: complex, z4: complex) -> Array:
        """Assemble S(x, (., ., z3, z4)) on the (z1, z2) grid."""
        out = np.zeros_like(self.groups[0].field)
        for g in self.groups:
            out += g.field / ((z3 - g.b) * (z4 - g.kappa))
        return out


def group_indices(beta_star: Array, k_entries: Array):
    """Partition coordinates by exact (beta*_i, K_ii) value."""
    pairs = np.stack([beta_star, k_entries], axis=1)
    _, inverse = np.unique(pairs, axis=0, return_inverse=True)
    return [np.nonzero(inverse == g)[0] for g in range(inverse.max() + 1)]


def eval_S(
    x: Array,
    contour: ContourSpec,
    instance: ProblemInstance,
    config: ModelConfig,
) -> SField:
    """Evaluate the resolvent statistic on the grid, one coordinate sweep
    per group.  Rejects iterates outside the disc the contour was sized
    for (|u_i| or |v_i| >= r1/2 yields incorrect contour integrals)."""
    if not instance.is_diagonal:
        raise ParameterError("resolvent field requires a diagonal covariance")
    x = np.asarray(x, dtype=float)
    u, v = split_x(x)
    bound = contour.r1 / 2.0
    if np.max(np.abs(x)) >= bound:
        raise ContourViolationError(
            f"iterate max |x| = {np.max(np.abs(x)):.4g} >= {bound:.4g}; "
            "enlarge the contour bound M"
        )
    z1 = contour.nodes(1)
    z2 = contour.nodes(2)
    p = psi(config, u, v)
    w = np.column_stack([p, instance.beta_star, np.ones(instance.d)])
    groups = []
    for idx in group_indices(instance.beta_star, instance.k_diag):
        r1 = 1.0 / (z1[:, None] - u[idx][None, :])  # (n1, m)
        r2 = 1.0 / (z2[:, None] - v[idx][None, :])
        wg = w[idx]
        field = np.einsum("ca,cb,ic,jc->abij", wg, wg, r1, r2) / instance.d
        groups.append(
            GroupField(
                b=float(instance.beta_star[idx[0]]),
                kappa=float(instance.k_diag[idx[0]]),
                count=len(idx),
                field=field,
            )
        )
    return SField(contour=contour, d=instance.d, groups=groups)


def _audit_imaginary(value: Array, what: str) -> Array:
    scale = np.linalg.norm(value)
    resid = np.linalg.norm(np.imag(value))
    if resid > 1e-8 * max(scale, 1e-300):
        raise QuadratureFailureError(
            f"{what}: imaginary residue {resid:.3e} exceeds 1e-8 of norm {scale:.3e}"
        )
    return np.real(value)


def recover_B(s_field: SField, contour: ContourSpec | None = None) -> Array:
    """B = (1/(2 pi)^4) contour integral of z4 S dz; z3, z4 integrals by residues per
    group, (z1, z2) by the trapezoid rule."""
    contour = s_field.contour if contour is None else contour
    z1 = contour.nodes(1)
    z2 = contour.nodes(2)
    acc = np.zeros((3, 3), dtype=complex)
    for g in s_field.groups:
        inner = circle_integral(g.field, z2, axis=3)
        outer = circle_integral(inner, z1, axis=2)
        acc += g.kappa * outer  # z3 residue is 1, z4 residue of z4/(z4-k) is k
    return _audit_imaginary(acc, "recover_B")


def _check_degree(poly, n, label):
    if len(poly) - 1 > n // 4:
        raise ParameterError(f"{label} degree {len(poly)-1} exceeds N/4 anti-alias cap")


def _polyval(coeffs, z):
    return np.polynomial.polynomial.polyval(z, np.asarray(coeffs, dtype=float))


def recover_spec(spec: StatisticSpec, s_field: SField) -> Array:
    """Weighted contour integral of one statistic spec (before applying g)."""
    contour = s_field.contour
    z1 = contour.nodes(1)
    z2 = contour.nodes(2)
    _check_degree(spec.q1, contour.n1, "q1")
    _check_degree(spec.q2, contour.n2, "q2")
    acc = np.zeros((3, 3), dtype=complex)
    for g in s_field.groups:
        weighted = g.field * _polyval(spec.q2, z2)[None, None, None, :]
        inner = circle_integral(weighted, z2, axis=3)
        inner = inner * _polyval(spec.q1, z1)[None, None, :]
        outer = circle_integral(inner, z1, axis=2)
        acc += float(_polyval(spec.q4, g.kappa)) * outer
    return _audit_imaginary(acc, f"recover_statistic[{spec.name}]")


def recover_statistic(spec: StatisticSpec, s_field: SField, contour=None) -> float:
    """g of the weighted contour integral; matches eval_statistic when the
    field came from eval_S at the same iterate."""
    return float(spec.g(recover_spec(spec, s_field)))


def recover_composite(stat: CompositeStatistic, s_field: SField) -> float:
    return float(sum(c * recover_statistic(s, s_field) for c, s in stat.terms))


def resolvent_bound_audit(
    x: Array, contour: ContourSpec, instance: ProblemInstance, config: ModelConfig
) -> float:
    """Largest coordinatewise resolvent-factor magnitude over all nodes."""
    u, v = split_x(np.asarray(x, dtype=float))
    worst = 0.0
    for nodes, diag in [
        (contour.nodes(1), u),
        (contour.nodes(2), v),
        (contour.nodes(3), instance.beta_star),
        (contour.nodes(4), instance.k_diag),
    ]:
        gaps = np.abs(nodes[:, None] - diag[None, :])
        worst = max(worst, float(np.max(1.0 / gaps)))
    return worst


# ---------------------------------------------------------------------------
# dense four-circle cross-check path (tiny d only)


def eval_S_dense(
    x: Array, contour: ContourSpec, instance: ProblemInstance, config: ModelConfig
) -> Array:
    """Full (3,3,n1,n2,n3,n4) S-field; for d <= 4 cross-checks only."""
    if instance.d > 4:
        raise ParameterError("dense contour evaluation restricted to d <= 4")
    u, v = split_x(np.asarray(x, dtype=float))
    if np.max(np.abs(x)) >= contour.r1 / 2.0:
        raise ContourViolationError("iterate outside the contour disc")
    z1, z2, z3, z4 = (contour.nodes(i) for i in (1, 2, 3, 4))
    p = psi(config, u, v)
    w = np.column_stack([p, instance.beta_star, np.ones(instance.d)])
    r1 = 1.0 / (z1[:, None] - u[None, :])
    r2 = 1.0 / (z2[:, None] - v[None, :])
    r3 = 1.0 / (z3[:, None] - instance.beta_star[None, :])
    r4 = 1.0 / (z4[:, None] - instance.k_diag[None, :])
    return (
        np.einsum("ca,cb,ic,jc,kc,lc->abijkl", w, w, r1, r2, r3, r4) / instance.d
    )


def recover_B_dense(s_dense: Array, contour: ContourSpec) -> Array:
    """Four-fold trapezoid recovery from the dense field."""
    z1, z2, z3, z4 = (contour.nodes(i) for i in (1, 2, 3, 4))
    out = circle_moment(s_dense, z4, axis=5, power=1)  # z4 * S
    out = circle_integral(out, z3, axis=4)
    out = circle_integral(out, z2, axis=3)
    out = circle_integral(out, z1, axis=2)
    return _audit_imaginary(out, "recover_B_dense")
