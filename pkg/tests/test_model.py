from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import solve_discrete_lyapunov

from countdfm.errors import ParameterError, StabilityError
from countdfm.marginals import MarginalSpec
from countdfm.model import (
    DfmParams,
    companion,
    counts_from_uniform,
    factor_acvf,
    preset_marginals,
    preset_params,
    preset_psi,
    simulate,
    standardize,
    stationary_acvf,
    stationary_state_cov,
    validate,
)


def random_params(rng, d, r, p, scale=0.5):
    Psi = [rng.uniform(-1, 1, (r, r)) for _ in range(p)]
    rho = np.max(np.abs(np.linalg.eigvals(companion(Psi))))
    # scaling Psi_k by c^k scales the companion eigenvalues by c
    Psi = [P * (scale / rho) ** (k + 1) for k, P in enumerate(Psi)]
    Lam = np.vstack([np.eye(r), rng.uniform(0, 1, (d - r, r))])
    A = rng.standard_normal((d, d))
    B = rng.standard_normal((r, r))
    return DfmParams(Lam, Psi, A @ A.T / d + 0.1 * np.eye(d), B @ B.T / r + 0.1 * np.eye(r))


def test_companion_layout():
    P1, P2 = np.array([[0.5, 0.1], [0.0, 0.3]]), np.array([[0.2, 0.0], [0.1, -0.1]])
    A = companion([P1, P2])
    assert np.array_equal(A[:2, :2], P1) and np.array_equal(A[:2, 2:], P2)
    assert np.array_equal(A[2:, :2], np.eye(2)) and np.array_equal(A[2:, 2:], np.zeros((2, 2)))


def test_scalar_ar1_variance():
    # Var = s^2 / (1 - psi^2)
    S = factor_acvf([np.array([[0.7]])], np.array([[1.0]]), 3)
    for h in range(4):
        assert S[h][0, 0] == pytest.approx(0.7**h / 0.51, rel=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 3))
def test_factor_acvf_matches_lyapunov(seed, r, p):
    rng = np.random.default_rng(seed)
    P = random_params(rng, r + 1, r, p)
    A = companion(P.Psi)
    Q = np.zeros_like(A)
    Q[:r, :r] = P.Sigma_eta
    ref = solve_discrete_lyapunov(A, Q)
    # autocovariances of the stacked state: Gamma(h) = A^h Gamma(0)
    S = factor_acvf(P.Psi, P.Sigma_eta, p + 2)
    for h in range(p + 3):
        assert np.allclose(S[h], (np.linalg.matrix_power(A, h) @ ref)[:r, :r], atol=1e-9)


def test_stationary_state_cov_rejects_unstable():
    with pytest.raises(StabilityError):
        stationary_state_cov(np.array([[1.0]]), np.array([[1.0]]))


def test_standardize_gives_unit_latent_variance():
    rng = np.random.default_rng(3)
    P = random_params(rng, 6, 2, 2)
    Ps, z_scale, y_scale = standardize(P)
    acf = stationary_acvf(Ps, 2)
    assert np.allclose(np.diag(acf.Sigma_Z[0]), 1.0, atol=1e-10)
    assert np.array_equal(Ps.Lambda[:2], np.eye(2))
    assert validate(Ps, standardized=True) == []
    # the correlation structure is scale free
    assert all(np.allclose(a, b, atol=1e-10) for a, b in zip(acf.R_Z, stationary_acvf(P, 2).R_Z))


def test_validate_reports_problems():
    P = preset_params("1", 5, 2, seed=0)
    assert validate(P) == []
    bad = P.copy()
    bad.Lambda[0, 1] = 0.3
    bad.Psi = [1.2 * np.eye(2)]
    msgs = " ".join(validate(bad))
    assert "identifiability" in msgs and "stability" in msgs


def test_params_shape_checks():
    with pytest.raises(ParameterError):
        DfmParams(np.ones((3, 2)), [np.eye(2)], np.eye(2), np.eye(2))
    with pytest.raises(ParameterError):
        DfmParams(np.ones((3, 2)), [], np.eye(3), np.eye(2))


def test_presets():
    P = preset_params("1", 15, 2, seed=1)
    assert np.array_equal(P.Lambda[:2], np.eye(2))
    assert np.all((P.Lambda[2:] >= 0) & (P.Lambda[2:] < 1))
    assert np.array_equal(P.Sigma_eps, np.eye(15)) and np.array_equal(P.Sigma_eta, np.eye(2))
    assert np.array_equal(preset_psi("2", 3)[0], -0.7 * np.eye(3))
    m = preset_marginals("poisson", 15)
    assert [s.params[0] for s in m] == [0.1] * 5 + [1.0] * 5 + [10.0] * 5
    with pytest.raises(ParameterError):
        preset_psi("9", 2)
    with pytest.raises(ParameterError):
        preset_marginals("gamma", 3)


def test_simulate_is_seeded_and_consistent():
    P = preset_params("1", 6, 2, seed=0)
    m = preset_marginals("poisson", 6)
    a = simulate(P, m, 300, seed=42)
    b = simulate(P, m, 300, seed=42)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.Z, b.Z)
    assert np.array_equal(a.X, counts_from_uniform(m, a.Z))
    # Z = Lambda* Y + eps* with the standardized loadings; eps is what is left
    Ps, _, _ = standardize(P)
    resid = a.Z - a.Y @ Ps.Lambda.T
    assert abs(resid.var() - np.mean(np.diag(Ps.Sigma_eps))) < 0.1


def test_simulated_moments_match_theory():
    P = preset_params("1", 4, 2, seed=2)
    m = [MarginalSpec.poisson(1.0)] * 4
    sim = simulate(P, m, 20000, seed=7)
    R = stationary_acvf(P, 1).R_Z
    Zc = sim.Z - sim.Z.mean(0)
    assert np.allclose(Zc.T @ Zc / len(Zc), R[0], atol=0.05)
    assert np.allclose(Zc[1:].T @ Zc[:-1] / len(Zc), R[1], atol=0.05)
    assert abs(sim.X.mean() - 1.0) < 0.05


def test_simulate_rejects_bad_input():
    P = preset_params("1", 4, 2, seed=0)
    with pytest.raises(ParameterError):
        simulate(P, [MarginalSpec.poisson(1.0)] * 3, 10)
    bad = P.copy()
    bad.Psi = [1.1 * np.eye(2)]
    with pytest.raises(StabilityError):
        simulate(bad, [MarginalSpec.poisson(1.0)] * 4, 10)
