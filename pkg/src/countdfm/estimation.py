"""Moment-based estimation: sample correlations -> inverse links -> PCA -> Yule-Walker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    CountDFMError,
    DegenerateSeriesError,
    DomainError,
    FitError,
    IdentifiabilityError,
    NearSingularToeplitzError,
    NumericError,
    ParameterError,
    RankError,
    StabilityError,
)
from .link import LinkBank, inverse_link_matrix
from .marginals import MarginalSpec, fit_marginal
from .model import DfmParams, LatentAcfSet, companion, spectral_radius, stationary_acvf

PSD_EPS = 1e-6
TOEPLITZ_COND_MAX = 1e12
DEFAULT_R_NB = 3


def sample_cross_correlations(X, max_lag: int) -> list[np.ndarray]:
    """``R_X(h)_{ij} = corr(X_{i,t+h}, X_{j,t})`` for ``h = 0..max_lag``.

    Means and variances come from the full sample and every lag uses the
    divisor ``T``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise DomainError("X must be a T x d matrix")
    T = X.shape[0]
    if not 0 <= max_lag < T:
        raise DomainError(f"lag must lie in [0, {T - 1}]")
    Xc = X - X.mean(axis=0)
    var = np.einsum("ti,ti->i", Xc, Xc) / T
    flat = np.flatnonzero(var <= 0)
    if flat.size:
        raise DegenerateSeriesError(f"series {int(flat[0])} is constant")
    sd = np.sqrt(var)
    out = []
    for h in range(max_lag + 1):
        G = Xc[h:].T @ Xc[: T - h] / T
        out.append(G / np.outer(sd, sd))
    np.fill_diagonal(out[0], 1.0)
    out[0] = 0.5 * (out[0] + out[0].T)
    return out


def sample_cross_correlation(X, h: int) -> np.ndarray:
    return sample_cross_correlations(X, h)[h]


def sorted_eigh(S: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs in descending order; each eigenvector has a nonnegative first entry."""
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    idx = np.argsort(w)[::-1]
    w, V = w[idx], V[:, idx]
    V = V * np.where(V[0] < 0, -1.0, 1.0)[None, :]
    return w, V


@dataclass
class PcaSplit:
    Lambda: np.ndarray
    Sigma_Y0: np.ndarray
    Sigma_eps: np.ndarray
    eigenvalues: np.ndarray
    U: np.ndarray


def pca_factor_estimate(R_Z0: np.ndarray, r: int) -> PcaSplit:
    """Split ``R_Z0 = U_r E_r U_r' + Sigma_eps`` and re-identify with ``B = U_r E_r^{1/2}``.

    ``B_1`` is the top ``r x r`` block; ``Lambda = [I; B_2 B_1^{-1}]`` and
    ``Sigma_Y(0) = B_1 B_1'``, so ``Lambda Sigma_Y(0) Lambda' = B B'``.
    """
    R = np.asarray(R_Z0, dtype=float)
    d = R.shape[0]
    if R.shape != (d, d):
        raise DomainError("R_Z0 must be square")
    if not 1 <= r < d:
        raise ParameterError(f"need 1 <= r < d, got r={r}, d={d}")
    w, V = sorted_eigh(R)
    if w[r - 1] <= 0:
        raise RankError(f"only {int(np.sum(w > 0))} positive eigenvalues, asked for r={r}")
    Ur, Er = V[:, :r], w[:r]
    B = Ur * np.sqrt(Er)[None, :]
    B1 = B[:r]
    if np.linalg.cond(B1) > 1e12:
        raise IdentifiabilityError("top r x r block of the principal loadings is singular")
    Lam = np.vstack([np.eye(r), np.linalg.solve(B1.T, B[r:].T).T])
    common = (Ur * Er[None, :]) @ Ur.T
    S_eps = R - common
    return PcaSplit(Lambda=Lam, Sigma_Y0=B1 @ B1.T, Sigma_eps=0.5 * (S_eps + S_eps.T), eigenvalues=w, U=V)


def factor_lag_cov(Lambda: np.ndarray, R_Zh: np.ndarray) -> np.ndarray:
    """``(L'L)^{-1} L' R L (L'L)^{-1}``, the least-squares fit of ``R ~ L S L'``."""
    G = Lambda.T @ Lambda
    try:
        Gi = np.linalg.inv(G)
    except np.linalg.LinAlgError as exc:
        raise NumericError("loadings Gram matrix is singular") from exc
    return Gi @ Lambda.T @ R_Zh @ Lambda @ Gi


def yule_walker(Sigma_Y: Sequence[np.ndarray]) -> tuple[list[np.ndarray], np.ndarray]:
    """Transitions and innovation covariance from ``Sigma_Y(0..p)``.

    Solves ``Sigma_Y(h) = sum_k Psi_k Sigma_Y(h-k)``, ``h = 1..p``, as one block
    Toeplitz system, then ``Sigma_eta = Sigma_Y(0) - sum_h Psi_h Sigma_Y(h)'``.
    """
    S = [np.atleast_2d(np.asarray(s, dtype=float)) for s in Sigma_Y]
    p = len(S) - 1
    if p < 1:
        raise ParameterError("need Sigma_Y(0..p) with p >= 1")
    r = S[0].shape[0]

    def lag(h: int) -> np.ndarray:
        return S[h] if h >= 0 else S[-h].T

    Gam = np.block([[lag(h - k) for h in range(p)] for k in range(p)])
    rhs = np.hstack(S[1:])
    cond = np.linalg.cond(Gam)
    if not np.isfinite(cond) or cond > TOEPLITZ_COND_MAX:
        raise NearSingularToeplitzError(float(cond))
    Phi = np.linalg.solve(Gam.T, rhs.T).T
    Psi = [Phi[:, r * k : r * (k + 1)] for k in range(p)]
    S_eta = S[0] - sum(Psi[h] @ S[h + 1].T for h in range(p))
    return Psi, 0.5 * (S_eta + S_eta.T)


@dataclass
class FittedModel:
    params: DfmParams
    marginals: list[MarginalSpec]
    latent_acf: LatentAcfSet
    eigenvalues: np.ndarray
    psd_shift: float = 0.0
    R_Z0_forecast: np.ndarray | None = None
    observed_support: list[np.ndarray] | None = field(default=None)

    @property
    def d(self) -> int:
        return self.params.d

    @property
    def r(self) -> int:
        return self.params.r

    @property
    def p(self) -> int:
        return self.params.p

    @classmethod
    def from_params(cls, params: DfmParams, marginals: list[MarginalSpec], observed_support=None) -> "FittedModel":
        """Wrap known parameters so they can drive the forecaster directly."""
        acf = stationary_acvf(params)
        R0, shift = psd_shift(acf.R_Z[0])
        return cls(
            params=params.copy(),
            marginals=list(marginals),
            latent_acf=acf,
            eigenvalues=np.sort(np.linalg.eigvalsh(acf.R_Z[0]))[::-1],
            psd_shift=shift,
            R_Z0_forecast=R0,
            observed_support=observed_support,
        )

    def forecast_params(self) -> DfmParams:
        """Parameters used by the filter.

        The latent covariance ``Lambda Sigma_Y(0) Lambda' + Sigma_eps`` equals
        ``R_Z(0)``; the forecaster uses the shifted copy
        ``(R_Z(0) + c I) / (1 + c)`` instead, which keeps a unit diagonal.
        That is ``Sigma_eps -> (Sigma_eps + c I) / (1 + c)`` together with
        factors rescaled by ``(1 + c)^{-1/2}``, i.e.
        ``Sigma_eta -> Sigma_eta / (1 + c)``.  ``Sigma_eta`` is clipped to its
        PSD part first.  An unstable fitted VAR cannot be forecast and raises.
        """
        P = self.params
        if spectral_radius(companion(P.Psi)) >= 1.0:
            raise StabilityError("fitted VAR is not stationary; cannot forecast")
        c = self.psd_shift
        S_eps = (P.Sigma_eps + c * np.eye(P.d)) / (1.0 + c)
        w, V = np.linalg.eigh(P.Sigma_eta)
        if w.min() <= 0:
            w = np.clip(w, PSD_EPS, None)
        S_eta = (V * w[None, :]) @ V.T / (1.0 + c)
        return DfmParams(P.Lambda.copy(), [Q.copy() for Q in P.Psi], S_eps, 0.5 * (S_eta + S_eta.T))


def psd_shift(R: np.ndarray, eps: float = PSD_EPS) -> tuple[np.ndarray, float]:
    """Shift eigenvalues by ``|lambda_min| + eps`` when ``lambda_min < 0``, then
    rescale to unit diagonal.  Returns ``(shifted, shift)``."""
    lam_min = float(np.linalg.eigvalsh(0.5 * (R + R.T)).min())
    if lam_min >= 0:
        return R.copy(), 0.0
    c = abs(lam_min) + eps
    S = R + c * np.eye(R.shape[0])
    sd = np.sqrt(np.diag(S))
    S = S / np.outer(sd, sd)
    return 0.5 * (S + S.T), c


def estimate_from_latent(R_Z: Sequence[np.ndarray], r: int, p: int) -> tuple[DfmParams, list[np.ndarray], np.ndarray]:
    """PCA and Yule-Walker on latent correlations ``R_Z(0..p)``."""
    if len(R_Z) < p + 1:
        raise ParameterError(f"need R_Z(0..{p})")
    split = pca_factor_estimate(R_Z[0], r)
    S_Y = [split.Sigma_Y0] + [factor_lag_cov(split.Lambda, R_Z[h]) for h in range(1, p + 1)]
    Psi, S_eta = yule_walker(S_Y)
    return DfmParams(split.Lambda, Psi, split.Sigma_eps, S_eta), S_Y, split.eigenvalues


def _family_list(families, d: int) -> list[str]:
    if isinstance(families, str):
        return [families] * d
    fams = list(families)
    if len(fams) != d:
        raise ParameterError(f"got {len(fams)} families for {d} series")
    return fams


def fit_marginals(X, families, r_nb: int = DEFAULT_R_NB) -> list[MarginalSpec]:
    X = np.asarray(X)
    fams = _family_list(families, X.shape[1])
    return [fit_marginal(X[:, i], f, r_nb=r_nb) for i, f in enumerate(fams)]


def latent_correlations(X, marginals: list[MarginalSpec], max_lag: int, bank: LinkBank | None = None) -> list[np.ndarray]:
    bank = LinkBank() if bank is None else bank
    R_X = sample_cross_correlations(X, max_lag)
    return [inverse_link_matrix(R, marginals, bank, lag0=(h == 0)) for h, R in enumerate(R_X)]


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except FitError:
        raise
    except (CountDFMError, np.linalg.LinAlgError) as exc:
        raise FitError(name, exc) from exc


def fit(
    X,
    families,
    r: int,
    p: int,
    *,
    r_nb: int = DEFAULT_R_NB,
    marginals: list[MarginalSpec] | None = None,
    bank: LinkBank | None = None,
) -> FittedModel:
    """Full pipeline; errors are wrapped in ``FitError`` tagged with the failing stage."""
    X = np.asarray(X)
    if X.ndim != 2:
        raise FitError("input", DomainError("X must be a T x d matrix"))
    T, d = X.shape
    if T <= p + 1:
        raise FitError("input", DomainError(f"need T > p + 1, got T={T}, p={p}"))
    if marginals is None:
        marginals = _stage("marginals", fit_marginals, X, families, r_nb)
    bank = LinkBank() if bank is None else bank
    R_Z = _stage("links", latent_correlations, X, marginals, p, bank)
    params, S_Y, eig = _stage("factors", estimate_from_latent, R_Z, r, p)
    R_fc, shift = psd_shift(R_Z[0])
    support = [np.unique(X[:, i]).astype(np.int64) for i in range(d)]
    return FittedModel(
        params=params,
        marginals=list(marginals),
        latent_acf=LatentAcfSet(R_Z=R_Z, Sigma_Y=S_Y),
        eigenvalues=eig,
        psd_shift=shift,
        R_Z0_forecast=R_fc,
        observed_support=support,
    )
