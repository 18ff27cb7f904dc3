"""SDE engines: absorbing states, Monte-Carlo oracles, weak order, Isserlis."""

import numpy as np
import pytest

from dln import model, sde, spectra
from dln.errors import ModelViolationError, ParameterError


def isotropic_instance(d, alpha=0.6, gamma=0.1):
    return model.ProblemInstance(
        d=d, beta_star=np.ones(d), x0=alpha * np.ones(2 * d), gamma=gamma,
        k_diag=np.ones(d),
    )


SQ = model.preset("squared")


# ---------------------------------------------------------------------------
# absorbing zero-risk state


@pytest.mark.parametrize("dynamics", ["hsgd", "sgf", "nondiag"])
def test_zero_risk_is_absorbing(dynamics):
    d = 6
    u0 = np.sqrt(2.0) * np.ones(d)
    kwargs = dict(d=d, beta_star=np.ones(d), x0=np.concatenate([u0, np.ones(d)]), gamma=0.4)
    if dynamics == "nondiag":
        inst = model.ProblemInstance(k_full=np.eye(d), **kwargs)
    else:
        inst = model.ProblemInstance(k_diag=np.ones(d), **kwargs)
    state = sde.init_state(inst, dynamics, seed=1)
    stepper = {"hsgd": sde.hsgd_step, "sgf": sde.sgf_step, "nondiag": sde.nondiag_step}[dynamics]
    for _ in range(40):
        state = stepper(state, SQ, inst, dt=2.0**-6)
    assert state.x == pytest.approx(inst.x0, abs=1e-12)


# ---------------------------------------------------------------------------
# coordinatewise form of the isotropic squared dynamics


def test_hsgd_reduces_to_coordinate_sde():
    # dU = -gamma U (U^2 - V^2 - 1) dt + 2 gamma sqrt(R) U dB per coordinate
    d = 5
    rng = np.random.default_rng(3)
    gamma, dt = 0.3, 2.0**-7
    inst = isotropic_instance(d, gamma=gamma)
    u = rng.uniform(0.2, 1.5, d)
    v = rng.uniform(0.2, 1.5, d)
    xi = rng.standard_normal(d)
    risk = np.mean((u**2 - v**2 - 1.0) ** 2) / 4.0
    expect_u = u - gamma * u * (u**2 - v**2 - 1.0) * dt + 2 * gamma * np.sqrt(risk) * u * xi * np.sqrt(dt)
    expect_v = v + gamma * v * (u**2 - v**2 - 1.0) * dt - 2 * gamma * np.sqrt(risk) * v * xi * np.sqrt(dt)
    got_u, got_v = sde.diagonal_increment(
        u, v, xi, SQ, inst.beta_star, inst.k_diag, gamma, dt, "hsgd"
    )
    assert got_u == pytest.approx(expect_u, abs=1e-14)
    assert got_v == pytest.approx(expect_v, abs=1e-14)


def test_shared_driver_for_u_and_v():
    # the same xi drives u_i and v_i: relative noise parts are exact negatives
    d = 4
    rng = np.random.default_rng(4)
    inst = isotropic_instance(d, gamma=0.2)
    u = rng.uniform(0.4, 1.2, d)
    v = rng.uniform(0.4, 1.2, d)
    xi = rng.standard_normal(d)
    dt = 2.0**-8
    drift_u, drift_v = sde.diagonal_increment(u, v, np.zeros(d), SQ, inst.beta_star, inst.k_diag, 0.2, dt, "hsgd")
    full_u, full_v = sde.diagonal_increment(u, v, xi, SQ, inst.beta_star, inst.k_diag, 0.2, dt, "hsgd")
    rel_u = (full_u - drift_u) / u
    rel_v = (full_v - drift_v) / v
    assert rel_u == pytest.approx(-rel_v, abs=1e-14)


def test_one_step_mean_matches_drift():
    # E-M mean over many drivers equals the drift-only update (3 SE oracle)
    d = 3
    rng = np.random.default_rng(5)
    inst = isotropic_instance(d, gamma=0.4)
    u = np.array([0.7, 1.1, 0.9])
    v = np.array([0.8, 0.6, 1.2])
    n = 1_000_000
    xi = rng.standard_normal((n, d))
    uu, _ = sde.diagonal_increment(
        u[None, :], v[None, :], xi, SQ, inst.beta_star, inst.k_diag, 0.4, 2.0**-6, "hsgd"
    )
    drift_u, _ = sde.diagonal_increment(
        u, v, np.zeros(d), SQ, inst.beta_star, inst.k_diag, 0.4, 2.0**-6, "hsgd"
    )
    se = uu.std(axis=0) / np.sqrt(n)
    assert np.all(np.abs(uu.mean(axis=0) - drift_u) <= 3 * se)


def test_sgf_gamma_zero_limit_is_gradient_flow():
    d = 4
    inst = isotropic_instance(d, gamma=0.0)
    state = sde.init_state(inst, "sgf", seed=6)
    dt = 2.0**-6
    x = inst.x0.copy()
    for _ in range(32):
        state = sde.sgf_step(state, SQ, inst, dt=dt)
        x = x - model.grad_risk(SQ, inst, x) * inst.d * dt
    assert state.x == pytest.approx(x, abs=1e-12)


# ---------------------------------------------------------------------------
# non-diagonal dynamics


def test_sqrtm_squares_back():
    rng = np.random.default_rng(7)
    d = 32
    k = spectra.sample_marchenko_pastur(d, 1.0, seed=11, diagonal_only=False)
    inst = model.ProblemInstance(
        d=d, beta_star=np.ones(d), x0=rng.uniform(-1, 1, 2 * d), gamma=0.2, k_full=k
    )
    sigma, _ = sde.nondiag_diffusion(SQ, inst, inst.x0)
    root = sde.sqrtm_psd(sigma)
    assert np.linalg.norm(root @ root - sigma) <= 1e-8 * np.linalg.norm(sigma)


def test_sqrtm_rejects_indefinite():
    with pytest.raises(ModelViolationError):
        sde.sqrtm_psd(np.diag([1.0, -0.5]))


def test_nondiag_rank_one_correction_for_diagonal_k():
    # with diagonal K the diffusion differs from the diagonal-case covariance
    # only by the rank-one d*gradR gradR^T term
    d = 8
    rng = np.random.default_rng(9)
    kd = rng.uniform(0.5, 1.5, d)
    x = rng.uniform(-1, 1, 2 * d)
    inst_full = model.ProblemInstance(
        d=d, beta_star=np.ones(d), x0=x, gamma=0.2, k_full=np.diag(kd)
    )
    inst_diag = model.ProblemInstance(
        d=d, beta_star=np.ones(d), x0=x, gamma=0.2, k_diag=kd
    )
    sigma, d_grad = sde.nondiag_diffusion(SQ, inst_full, x)
    u, v = x[:d], x[d:]
    du, dv = model.grad_psi(SQ, u, v)
    icoef = model.noise_coeff(SQ, inst_diag, x)
    diag_cov = icoef * np.block(
        [[np.diag(du * kd * du), np.diag(du * kd * dv)],
         [np.diag(dv * kd * du), np.diag(dv * kd * dv)]]
    )
    assert sigma == pytest.approx(diag_cov + np.outer(d_grad, d_grad) / d, abs=1e-12)


def test_isserlis_covariance_oracle():
    # MC covariance of <psi - beta*, a> a matches the Wick closed form
    d = 16
    k = spectra.sample_marchenko_pastur(d, 1.0, seed=13, diagonal_only=False)
    rng = np.random.default_rng(15)
    c = rng.uniform(-1, 1, d)
    kc = k @ c
    closed = (c @ kc) * k + np.outer(kc, kc)
    chol = np.linalg.cholesky(k)
    n, chunk = 1_000_000, 100_000
    sum_g = np.zeros(d)
    sum_prod = np.zeros((d, d))
    sum_prod2 = np.zeros((d, d))
    for _ in range(n // chunk):
        a = rng.standard_normal((chunk, d)) @ chol.T
        g = (a @ c)[:, None] * a
        sum_g += g.sum(axis=0)
        prod = np.einsum("ni,nj->ij", g, g)
        sum_prod += prod
        sum_prod2 += np.einsum("ni,nj->ij", g * g, g * g)
    mean_g = sum_g / n
    second = sum_prod / n
    cov_mc = second - np.outer(mean_g, mean_g)
    se = np.sqrt(np.maximum(sum_prod2 / n - second**2, 0.0) / n)
    assert np.all(np.abs(cov_mc - closed) <= 4 * se + 1e-12)


def test_nondiag_dimension_guard():
    d = 600
    inst = model.ProblemInstance(
        d=d, beta_star=np.ones(d), x0=np.zeros(2 * d), gamma=0.1, k_full=np.eye(d)
    )
    state = sde.init_state(inst, "nondiag", seed=1)
    with pytest.raises(ParameterError):
        sde.nondiag_step(state, SQ, inst)


def test_dt_guard():
    inst = isotropic_instance(4)
    state = sde.init_state(inst, "hsgd", seed=1)
    with pytest.raises(ParameterError):
        sde.hsgd_step(state, SQ, inst, dt=0.2)


# ---------------------------------------------------------------------------
# weak convergence order (common-random-numbers coupling)


def run_coupled_levels(r, d, gamma, horizon, exponents, seed):
    """Integrate hsgd at several dt = 2^-e on one shared Brownian path."""
    inst = isotropic_instance(d, gamma=gamma)
    rng = spectra.stream(seed, 90)
    fine_e = max(exponents)
    dt_fine = 2.0**-fine_e
    n_fine = int(round(horizon / dt_fine))
    states = {e: (inst.u0[None, :] * np.ones((r, 1)), inst.v0[None, :] * np.ones((r, 1))) for e in exponents}
    acc = {e: np.zeros((r, d)) for e in exponents}
    for i in range(1, n_fine + 1):
        xi = rng.standard_normal((r, d))
        for e in exponents:
            acc[e] += xi
            period = 2 ** (fine_e - e)
            if i % period == 0:
                dt = 2.0**-e
                u, v = states[e]
                states[e] = sde.diagonal_increment(
                    u, v, acc[e] / np.sqrt(period), SQ, inst.beta_star,
                    inst.k_diag, gamma, dt, "hsgd",
                )
                acc[e] = np.zeros((r, d))
    out = {}
    for e in exponents:
        u, v = states[e]
        out[e] = np.mean((u**2 - v**2 - 1.0) ** 2) / 4.0
    return out


def test_weak_order_one_ratios():
    exponents = [5, 6, 7, 8, 9]
    risks = run_coupled_levels(
        r=10_000, d=64, gamma=0.5, horizon=1.0, exponents=exponents, seed=33
    )
    diffs = [abs(risks[e] - risks[e + 1]) for e in exponents[:-1]]
    ratios = [diffs[i] / diffs[i + 1] for i in range(len(diffs) - 1)]
    assert all(r >= 1.7 for r in ratios), (diffs, ratios)


def test_time_change_consistency():
    # constant gamma: HSGD at time T matches SGF at time gamma*T in law
    d, gamma, horizon = 256, 0.5, 4.0
    inst = isotropic_instance(d, gamma=gamma)
    finals_h, finals_s = [], []
    for run in range(24):
        rec_h = sde.run_sde(SQ, inst, "hsgd", horizon, dt=2.0**-8,
                            record_grid=np.array([horizon]), seed=41, run_id=run)
        rec_s = sde.run_sde(SQ, inst, "sgf", gamma * horizon, dt=2.0**-8,
                            record_grid=np.array([gamma * horizon]), seed=42, run_id=run)
        finals_h.append(rec_h.stats["risk"][0])
        finals_s.append(rec_s.stats["risk"][0])
    med_h, med_s = np.median(finals_h), np.median(finals_s)
    spread = np.std(finals_h) + np.std(finals_s)
    assert abs(med_h - med_s) <= 3 * spread / np.sqrt(24) + 2e-3, (med_h, med_s)
