from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from countdfm.errors import DegenerateSeriesError, DomainError, FitError, NearSingularToeplitzError, ParameterError
from countdfm.estimation import (
    FittedModel,
    estimate_from_latent,
    fit,
    pca_factor_estimate,
    psd_shift,
    sample_cross_correlations,
    sorted_eigh,
    yule_walker,
)
from countdfm.link import LinkBank
from countdfm.model import companion, factor_acvf, preset_marginals, preset_params, simulate, standardize, stationary_acvf


def test_sample_cross_correlations_against_loop():
    rng = np.random.default_rng(0)
    X = rng.poisson(2.0, size=(50, 3))
    R = sample_cross_correlations(X, 2)
    T = len(X)
    m, s = X.mean(0), X.std(0)
    for h in range(3):
        for i in range(3):
            for j in range(3):
                ref = sum((X[t + h, i] - m[i]) * (X[t, j] - m[j]) for t in range(T - h)) / T / (s[i] * s[j])
                assert R[h][i, j] == pytest.approx(ref, abs=1e-12)
    assert np.array_equal(np.diag(R[0]), np.ones(3))


def test_sample_cross_correlations_errors():
    with pytest.raises(DegenerateSeriesError):
        sample_cross_correlations(np.array([[1, 0], [1, 1], [1, 0]]), 1)
    with pytest.raises(DomainError):
        sample_cross_correlations(np.ones((3, 2)), 3)


def test_sorted_eigh_sign_convention():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((5, 5))
    w, V = sorted_eigh(A @ A.T)
    assert np.all(np.diff(w) <= 0)
    assert np.all(V[0] >= 0)
    assert np.allclose((V * w) @ V.T, A @ A.T)


def test_pca_recovers_exact_factor_structure():
    # population R_Z(0) of a standardized model; its common part has rank r
    P, _, _ = standardize(preset_params("1", 8, 2, seed=4))
    R0 = stationary_acvf(P, 0).R_Z[0]
    split = pca_factor_estimate(R0, 2)
    common = split.Lambda @ split.Sigma_Y0 @ split.Lambda.T
    assert np.allclose(common + split.Sigma_eps, R0, atol=1e-12)
    assert np.array_equal(split.Lambda[:2], np.eye(2))
    w = np.sort(np.linalg.eigvalsh(R0))[::-1]
    assert np.allclose(split.eigenvalues, w)


def test_pca_argument_checks():
    with pytest.raises(ParameterError):
        pca_factor_estimate(np.eye(3), 3)
    with pytest.raises(DomainError):
        pca_factor_estimate(np.ones((2, 3)), 1)


@given(st.integers(0, 5000), st.integers(1, 3), st.integers(1, 3))
def test_yule_walker_inverts_population_acvf(seed, r, p):
    rng = np.random.default_rng(seed)
    Psi = [rng.uniform(-1, 1, (r, r)) for _ in range(p)]
    rho = np.max(np.abs(np.linalg.eigvals(companion(Psi))))
    # scaling Psi_k by c^k scales the companion eigenvalues by c
    Psi = [M * (0.6 / rho) ** (k + 1) for k, M in enumerate(Psi)]
    B = rng.standard_normal((r, r))
    S_eta = B @ B.T + 0.2 * np.eye(r)
    S = factor_acvf(Psi, S_eta, p)
    Psi_hat, S_eta_hat = yule_walker(S)
    for a, b in zip(Psi_hat, Psi):
        assert np.allclose(a, b, atol=1e-7)
    assert np.allclose(S_eta_hat, S_eta, atol=1e-7)


def test_yule_walker_scalar():
    Psi, s = yule_walker([np.array([[1.0]]), np.array([[0.5]])])
    assert Psi[0][0, 0] == pytest.approx(0.5) and s[0, 0] == pytest.approx(0.75)


def test_yule_walker_singular():
    with pytest.raises(NearSingularToeplitzError):
        yule_walker([np.ones((2, 2)), np.ones((2, 2))])


def test_estimate_from_population_latent_moments():
    P, _, _ = standardize(preset_params("3", 10, 2, seed=9))
    R = stationary_acvf(P, 2).R_Z
    est, _, _ = estimate_from_latent(R, 2, 2)
    assert np.allclose(est.Lambda, P.Lambda, atol=0.15)
    assert np.allclose(np.diag(est.Sigma_eps), np.diag(P.Sigma_eps), atol=0.2)


def test_psd_shift():
    R = np.array([[1.0, 0.9, -0.9], [0.9, 1.0, 0.9], [-0.9, 0.9, 1.0]])
    S, c = psd_shift(R)
    assert c > 0
    assert np.linalg.eigvalsh(S).min() > 0
    assert np.allclose(np.diag(S), 1.0)
    S2, c2 = psd_shift(np.eye(3))
    assert c2 == 0.0 and np.array_equal(S2, np.eye(3))


def test_fit_recovers_parameters_on_long_sample():
    P = preset_params("1", 9, 2, seed=0)
    m = preset_marginals("negbin", 9)
    sim = simulate(P, m, 4000, seed=1)
    fm = fit(sim.X, "negbin", 2, 1)
    Ps, _, _ = standardize(P)
    assert np.linalg.norm(fm.params.Lambda - Ps.Lambda) / np.linalg.norm(Ps.Lambda) < 0.2
    assert np.allclose(fm.params.Psi[0], Ps.Psi[0], atol=0.15)
    assert [s.params[0] for s in fm.marginals] == [3] * 9
    assert all(np.array_equal(fm.observed_support[i], np.unique(sim.X[:, i])) for i in range(9))


def test_fit_errors_are_tagged():
    X = np.zeros((20, 3), dtype=int)
    X[::2, 1:] = 1
    with pytest.raises(FitError) as info:
        fit(X, "bernoulli", 1, 1)
    assert info.value.stage == "marginals"
    with pytest.raises(FitError):
        fit(X[:2], "bernoulli", 1, 1)


def test_fit_reuses_bank():
    P = preset_params("1", 6, 2, seed=0)
    m = preset_marginals("poisson", 6)
    X = simulate(P, m, 200, seed=3).X
    bank = LinkBank()
    a = fit(X, "poisson", 2, 1, bank=bank)
    n = len(bank)
    b = fit(X, "poisson", 2, 1, bank=bank)
    assert len(bank) == n > 0
    assert np.array_equal(a.params.Lambda, b.params.Lambda)


def test_from_params_and_forecast_params():
    P, _, _ = standardize(preset_params("1", 5, 2, seed=0))
    fm = FittedModel.from_params(P, preset_marginals("poisson", 5))
    assert fm.psd_shift == 0.0
    fp = fm.forecast_params()
    assert np.allclose(fp.Sigma_eps, P.Sigma_eps)


def test_forecast_params_reproduce_shifted_correlation():
    from countdfm.kalman import build_state_space

    P = preset_params("1", 15, 2, seed=12345)
    X = simulate(P, preset_marginals("bernoulli", 15), 200, seed=8).X
    fm = fit(X, "bernoulli", 2, 1)
    assert fm.psd_shift > 0
    fp = fm.forecast_params()
    ss = build_state_space(fp)
    implied = fp.Lambda @ ss.Q0[:2, :2] @ fp.Lambda.T + fp.Sigma_eps
    assert np.allclose(implied, fm.R_Z0_forecast, atol=1e-8)
