"""Model-core tests: inner map, derivatives, risk, curvature, statistics.

Derivative checks use central finite differences as the independent oracle.
"""

import numpy as np
import pytest

from dln import model
from dln.errors import DimensionError, NumericalOverflowError, ParameterError


def make_instance(config, d, beta=None, k=None, x0=None, gamma=0.1):
    beta = np.ones(d) if beta is None else np.asarray(beta, float)
    k = np.ones(d) if k is None else np.asarray(k, float)
    x0 = np.zeros(2 * d) if x0 is None else np.asarray(x0, float)
    return model.ProblemInstance(d=d, beta_star=beta, x0=x0, gamma=gamma, k_diag=k)


def random_instance(rng, config, d=12):
    return make_instance(
        config,
        d,
        beta=rng.uniform(-1, 1, d),
        k=rng.uniform(0.2, 2.0, d),
        x0=rng.uniform(-1, 1, 2 * d),
    )


# ---------------------------------------------------------------------------
# presets


def test_presets_match_parametrizations():
    had = model.preset("hadamard")
    assert (had.q11, had.q12, had.q22, had.l1, had.l2, had.c) == (0, 0.5, 0, 0, 0, 0)
    assert had.loss_scale == 0.5
    sq = model.preset("squared")
    assert (sq.q11, sq.q12, sq.q22) == (1, 0, -1)
    assert sq.loss_scale == 0.25
    lin = model.preset("linear")
    assert (lin.q11, lin.q12, lin.q22, lin.l1, lin.l2) == (0, 0, 0, 1, 0)
    assert lin.loss_scale == 0.5
    with pytest.raises(ParameterError):
        model.preset("cubic")


# ---------------------------------------------------------------------------
# psi and its Jacobian


def test_psi_squared_symmetry():
    sq = model.preset("squared")
    assert model.psi(sq, np.array([1.0]), np.array([1.0])) == pytest.approx([0.0])


def test_psi_hadamard_product():
    had = model.preset("hadamard")
    assert model.psi(had, np.array([2.0]), np.array([3.0])) == pytest.approx([6.0])


def test_psi_alpha_init_is_zero():
    # u0 = v0 = alpha * 1 gives a zero inner map under the squared preset
    sq = model.preset("squared")
    a = 0.6 * np.ones(2)
    assert model.psi(sq, a, a) == pytest.approx([0.0, 0.0])


def test_psi_dimension_mismatch():
    sq = model.preset("squared")
    with pytest.raises(DimensionError):
        model.psi(sq, np.ones(3), np.ones(2))


def test_grad_psi_examples():
    sq = model.preset("squared")
    du, dv = model.grad_psi(sq, np.array([1.0]), np.array([1.0]))
    assert du == pytest.approx([2.0]) and dv == pytest.approx([-2.0])
    had = model.preset("hadamard")
    du, dv = model.grad_psi(had, np.array([2.0]), np.array([3.0]))
    assert du == pytest.approx([3.0]) and dv == pytest.approx([2.0])
    lin = model.preset("linear")
    du, dv = model.grad_psi(lin, np.array([0.3, -2.0]), np.array([5.0, 0.1]))
    assert np.allclose(du, 1.0) and np.allclose(dv, 0.0)


@pytest.mark.parametrize("name", ["hadamard", "squared", "linear"])
def test_grad_psi_finite_differences(name):
    config = model.preset(name)
    rng = np.random.default_rng(7)
    h = 1e-5
    for _ in range(100):
        u = rng.uniform(-2, 2, 5)
        v = rng.uniform(-2, 2, 5)
        du, dv = model.grad_psi(config, u, v)
        for i in range(5):
            e = np.zeros(5)
            e[i] = h
            fd_u = (model.psi(config, u + e, v)[i] - model.psi(config, u - e, v)[i]) / (2 * h)
            fd_v = (model.psi(config, u, v + e)[i] - model.psi(config, u, v - e)[i]) / (2 * h)
            assert abs(du[i] - fd_u) <= 1e-6 * (1 + abs(fd_u))
            assert abs(dv[i] - fd_v) <= 1e-6 * (1 + abs(fd_v))


# ---------------------------------------------------------------------------
# risk, noise coefficient, curvature


def test_risk_zero_residual():
    sq = model.preset("squared")
    d = 4
    inst = make_instance(sq, d, beta=np.zeros(d), x0=0.5 * np.ones(2 * d))
    assert model.risk(sq, inst, inst.x0) == pytest.approx(0.0)


def test_risk_alpha_init_value():
    sq = model.preset("squared")
    d = 8
    inst = make_instance(sq, d, x0=0.6 * np.ones(2 * d))
    assert model.risk(sq, inst, inst.x0) == pytest.approx(0.25)


def test_risk_hadamard_single_coordinate():
    had = model.preset("hadamard")
    inst = make_instance(had, 1, x0=np.array([2.0, 0.0]))
    assert model.risk(had, inst, inst.x0) == pytest.approx(0.5)


def test_risk_matches_h_of_B():
    rng = np.random.default_rng(3)
    for name in ("hadamard", "squared", "linear"):
        config = model.preset(name)
        inst = random_instance(rng, config)
        for _ in range(10):
            x = rng.uniform(-1.5, 1.5, 2 * inst.d)
            r = model.risk(config, inst, x)
            hb = config.h_of_B(model.summary_b(config, inst, x))
            assert abs(r - hb) <= 1e-12 * (1 + abs(r))


def test_noise_coeff_examples():
    had = model.preset("hadamard")
    inst = make_instance(had, 1, x0=np.array([2.0, 0.0]))
    # I = 2h for the s = 1/2 presets
    assert model.noise_coeff(had, inst, inst.x0) == pytest.approx(1.0)
    sq = model.preset("squared")
    inst2 = make_instance(sq, 8, x0=0.6 * np.ones(16))
    assert model.noise_coeff(sq, inst2, inst2.x0) == pytest.approx(0.25)
    inst3 = make_instance(sq, 4, beta=np.zeros(4), x0=0.5 * np.ones(8))
    assert model.noise_coeff(sq, inst3, inst3.x0) == pytest.approx(0.0)


def test_hessian_trace_squared_alpha():
    sq = model.preset("squared")
    d = 16
    inst = make_instance(sq, d, x0=0.6 * np.ones(2 * d))
    assert model.hessian_trace(sq, inst, inst.x0) == pytest.approx(8 * 0.36)


def test_hessian_trace_hadamard_formula():
    had = model.preset("hadamard")
    rng = np.random.default_rng(11)
    d = 9
    inst = make_instance(had, d)
    x = rng.uniform(-2, 2, 2 * d)
    expected = np.mean(x[:d] ** 2 + x[d:] ** 2)
    assert model.hessian_trace(had, inst, x) == pytest.approx(expected)


def test_hessian_trace_at_origin():
    sq = model.preset("squared")
    inst = make_instance(sq, 4)
    assert model.hessian_trace(sq, inst, np.zeros(8)) == pytest.approx(0.0)


def test_full_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    h = 1e-5
    for name in ("hadamard", "squared", "linear"):
        config = model.preset(name)
        inst = random_instance(rng, config, d=6)
        x = rng.uniform(-1.5, 1.5, 12)
        g = model.grad_risk(config, inst, x)
        for i in range(12):
            e = np.zeros(12)
            e[i] = h
            fd = (model.risk(config, inst, x + e) - model.risk(config, inst, x - e)) / (2 * h)
            assert abs(g[i] - fd) <= 1e-6 * (1 + abs(fd))


def test_summary_b_psd_and_trace_entry():
    rng = np.random.default_rng(13)
    sq = model.preset("squared")
    for _ in range(10):
        inst = random_instance(rng, sq, d=10)
        x = rng.uniform(-2, 2, 20)
        B = model.summary_b(sq, inst, x)
        assert np.allclose(B, B.T)
        evals = np.linalg.eigvalsh(B)
        assert evals.min() >= -1e-10 * np.linalg.norm(B)
        assert B[2, 2] == pytest.approx(np.mean(inst.k_diag), abs=1e-14)


# ---------------------------------------------------------------------------
# statistics


def test_statistic_risk_spec_matches_risk_op():
    sq = model.preset("squared")
    rng = np.random.default_rng(17)
    inst = random_instance(rng, sq)
    stat = model.statistic_preset("risk", sq)
    for _ in range(5):
        x = rng.uniform(-1, 1, 2 * inst.d)
        assert model.eval_composite(stat, sq, inst, x) == pytest.approx(
            model.risk(sq, inst, x), abs=1e-14
        )


def test_statistic_psi_norm():
    sq = model.preset("squared")
    inst = make_instance(sq, 2)
    stat = model.statistic_preset("psi_norm2", sq)
    x = np.array([1.0, 1.0, 0.0, 0.0])
    assert model.eval_composite(stat, sq, inst, x) == pytest.approx(1.0)


def test_statistic_error_norm_at_target():
    sq = model.preset("squared")
    d = 5
    inst = make_instance(sq, d, x0=np.concatenate([np.sqrt(2.0) * np.ones(d), np.ones(d)]))
    # psi = 2 - 1 = 1 = beta*
    stat = model.statistic_preset("error_norm2", sq)
    assert model.eval_composite(stat, sq, inst, inst.x0) == pytest.approx(0.0, abs=1e-12)


def test_statistic_homogeneity_reproduces_B():
    sq = model.preset("squared")
    rng = np.random.default_rng(23)
    inst = random_instance(rng, sq, d=7)
    x = rng.uniform(-1, 1, 14)
    B = model.summary_b(sq, inst, x)
    for i in range(3):
        for j in range(3):
            spec = model.StatisticSpec("entry", lambda M, i=i, j=j: M[i, j], q4=(0.0, 1.0))
            assert model.eval_statistic(spec, sq, inst, x) == B[i, j]


def test_statistic_presets_match_direct_ops():
    for name in ("hadamard", "squared"):
        config = model.preset(name)
        rng = np.random.default_rng(29)
        inst = random_instance(rng, config, d=8)
        x = rng.uniform(-1.5, 1.5, 16)
        pairs = {
            "risk": model.risk(config, inst, x),
            "noise_coeff": model.noise_coeff(config, inst, x),
            "hessian_trace": model.hessian_trace(config, inst, x),
        }
        for stat_name, direct in pairs.items():
            stat = model.statistic_preset(stat_name, config)
            assert model.eval_composite(stat, config, inst, x) == pytest.approx(
                direct, rel=1e-12, abs=1e-12
            )


def test_statistic_overflow_reports_coordinate():
    sq = model.preset("squared")
    inst = make_instance(sq, 3)
    x = np.array([1.0, np.inf, 1.0, 0.0, 0.0, 0.0])
    spec = model.StatisticSpec("plain", lambda M: M[0, 0])
    with pytest.raises(NumericalOverflowError) as err:
        model.eval_statistic(spec, sq, inst, x)
    assert err.value.coordinate == 1


def test_statistic_degree_cap():
    sq = model.preset("squared")
    inst = make_instance(sq, 3)
    spec = model.StatisticSpec("deep", lambda M: M[0, 0], q1=tuple([0.0] * 9 + [1.0]))
    with pytest.raises(ParameterError):
        model.eval_statistic(spec, sq, inst, np.zeros(6))


# ---------------------------------------------------------------------------
# instance validation


def test_instance_audits():
    sq = model.preset("squared")
    with pytest.raises(ParameterError):
        model.ProblemInstance(
            d=3, beta_star=np.ones(3), x0=np.zeros(6), gamma=0.1,
            k_diag=np.array([1.0, 2.0, 3.0]), kbar=2.0,
        )
    inst = make_instance(sq, 3, k=np.full(3, 0.01))
    assert inst.trace_flag  # mean entry outside [0.1, 10] flags, not rejects
    with pytest.raises(DimensionError):
        model.ProblemInstance(d=3, beta_star=np.ones(4), x0=np.zeros(6), gamma=0.1, k_diag=np.ones(3))


def test_piecewise_schedule():
    sched = model.PiecewiseConstantSchedule(breaks=[0.0, 1.0, 2.0], values=[0.1, 0.2, 0.05])
    assert sched(0.0) == 0.1
    assert sched(0.5) == 0.1
    assert sched(1.0) == 0.2
    assert sched(3.7) == 0.05
