"""Latent Gaussian dynamic factor model: parameters, implied covariances, simulation.

Counts are generated as ``X_{i,t} = F_i^{-1}(Phi(Z_{i,t}))`` where
``Z_t = Lambda Y_t + eps_t`` and ``Y_t`` follows a stationary VAR(p).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import ParameterError, StabilityError
from .marginals import MarginalSpec, from_latent, quantile

LYAPUNOV_TOL = 1e-12
STABILITY_MARGIN = 1.0
BURN_IN = 500


@dataclass
class DfmParams:
    Lambda: np.ndarray
    Psi: list[np.ndarray]
    Sigma_eps: np.ndarray
    Sigma_eta: np.ndarray

    def __post_init__(self):
        self.Lambda = np.atleast_2d(np.asarray(self.Lambda, dtype=float))
        self.Psi = [np.atleast_2d(np.asarray(P, dtype=float)) for P in self.Psi]
        self.Sigma_eps = np.atleast_2d(np.asarray(self.Sigma_eps, dtype=float))
        self.Sigma_eta = np.atleast_2d(np.asarray(self.Sigma_eta, dtype=float))
        d, r = self.Lambda.shape
        if self.Sigma_eps.shape != (d, d):
            raise ParameterError(f"Sigma_eps must be {d}x{d}")
        if self.Sigma_eta.shape != (r, r):
            raise ParameterError(f"Sigma_eta must be {r}x{r}")
        if not self.Psi or any(P.shape != (r, r) for P in self.Psi):
            raise ParameterError(f"Psi must be a non-empty list of {r}x{r} matrices")

    @property
    def d(self) -> int:
        return self.Lambda.shape[0]

    @property
    def r(self) -> int:
        return self.Lambda.shape[1]

    @property
    def p(self) -> int:
        return len(self.Psi)

    def copy(self) -> "DfmParams":
        return DfmParams(self.Lambda.copy(), [P.copy() for P in self.Psi], self.Sigma_eps.copy(), self.Sigma_eta.copy())


def companion(Psi: list[np.ndarray]) -> np.ndarray:
    """``rp x rp`` companion matrix of a VAR(p)."""
    r = Psi[0].shape[0]
    p = len(Psi)
    A = np.zeros((r * p, r * p))
    A[:r, :] = np.hstack(Psi)
    if p > 1:
        A[r:, :-r] = np.eye(r * (p - 1))
    return A


def spectral_radius(A: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(A)))) if A.size else 0.0


def validate(params: DfmParams, standardized: bool = False, tol: float = 1e-8) -> list[str]:
    """All violated invariants, as messages.  An empty list means valid."""
    problems: list[str] = []
    r = params.r
    top = params.Lambda[:r]
    if not np.array_equal(top, np.eye(r)):
        problems.append("identifiability: top r x r block of Lambda is not the identity")
    if params.d <= r:
        problems.append(f"dimension: need d > r, got d={params.d}, r={r}")
    rho = spectral_radius(companion(params.Psi))
    if not rho < STABILITY_MARGIN:
        problems.append(f"stability: companion spectral radius {rho:.6g} >= 1")
    for name, S in (("Sigma_eps", params.Sigma_eps), ("Sigma_eta", params.Sigma_eta)):
        if not np.allclose(S, S.T, atol=1e-12):
            problems.append(f"symmetry: {name} is not symmetric")
    if np.linalg.eigvalsh(0.5 * (params.Sigma_eps + params.Sigma_eps.T)).min() < -tol:
        problems.append("covariance: Sigma_eps is not positive semidefinite")
    if np.linalg.eigvalsh(0.5 * (params.Sigma_eta + params.Sigma_eta.T)).min() <= 0:
        problems.append("covariance: Sigma_eta is not positive definite")
    if standardized and not problems:
        diag = np.diag(stationary_acvf(params, 0).Sigma_Z[0])
        if np.max(np.abs(diag - 1.0)) > tol:
            problems.append("scale: latent Z does not have unit variance")
    return problems


def stationary_state_cov(A: np.ndarray, Q: np.ndarray, tol: float = LYAPUNOV_TOL, max_iter: int = 200) -> np.ndarray:
    """Solve ``P = A P A' + Q`` by the doubling iteration."""
    if spectral_radius(A) >= 1.0:
        raise StabilityError("state transition is not stable")
    P = Q.copy()
    Ak = A.copy()
    for _ in range(max_iter):
        step = Ak @ P @ Ak.T
        P = P + step
        Ak = Ak @ Ak
        if np.max(np.abs(step)) < tol * max(1.0, np.max(np.abs(P))):
            break
    resid = A @ P @ A.T + Q - P
    if np.max(np.abs(resid)) > 1e3 * tol * max(1.0, np.max(np.abs(P))):
        raise StabilityError("Lyapunov iteration did not converge")
    return 0.5 * (P + P.T)


@dataclass
class LatentAcfSet:
    """Autocovariances ``Sigma_Y(h) = E[Y_{t+h} Y_t']``, ``Sigma_Z(h)`` and the
    standardized ``R_Z(h)`` for ``h = 0..max_lag``."""

    R_Z: list[np.ndarray]
    Sigma_Y: list[np.ndarray]
    Sigma_Z: list[np.ndarray] = field(default_factory=list)


def factor_acvf(Psi: list[np.ndarray], Sigma_eta: np.ndarray, max_lag: int) -> list[np.ndarray]:
    r = Sigma_eta.shape[0]
    p = len(Psi)
    Q = np.zeros((r * p, r * p))
    Q[:r, :r] = Sigma_eta
    P = stationary_state_cov(companion(Psi), Q)
    # P holds the blocks Sigma_Y(j - i) for the stacked state (Y_t, ..., Y_{t-p+1})
    out = [P[:r, r * h : r * (h + 1)] for h in range(min(p, max_lag + 1))]
    for h in range(p, max_lag + 1):
        out.append(sum(Psi[k] @ out[h - k - 1] for k in range(p)))
    return [0.5 * (out[0] + out[0].T)] + out[1:]


def stationary_acvf(params: DfmParams, max_lag: int | None = None) -> LatentAcfSet:
    max_lag = params.p if max_lag is None else max_lag
    S_Y = factor_acvf(params.Psi, params.Sigma_eta, max_lag)
    L = params.Lambda
    S_Z = [L @ S_Y[0] @ L.T + params.Sigma_eps] + [L @ S @ L.T for S in S_Y[1:]]
    sd = np.sqrt(np.diag(S_Z[0]))
    inv = np.where(sd > 0, 1.0 / np.where(sd > 0, sd, 1.0), 0.0)
    R_Z = [inv[:, None] * S * inv[None, :] for S in S_Z]
    R_Z[0] = 0.5 * (R_Z[0] + R_Z[0].T)
    if np.all(sd > 0):
        np.fill_diagonal(R_Z[0], 1.0)
    return LatentAcfSet(R_Z=R_Z, Sigma_Y=S_Y, Sigma_Z=S_Z)


def standardize(params: DfmParams) -> tuple[DfmParams, np.ndarray, np.ndarray]:
    """Rescale so that every ``Z_i`` has unit variance, keeping the identity top block.

    With ``D = diag(Sigma_Z(0))`` and ``D_1`` its first ``r`` entries, the
    rescaled latent is ``D^{-1/2} Z = Lambda* Y* + eps*`` where
    ``Y* = D_1^{-1/2} Y`` and ``Lambda* = D^{-1/2} Lambda D_1^{1/2}``.
    Returns ``(params*, z_scale, y_scale)`` with ``Z* = Z / z_scale`` and
    ``Y* = Y / y_scale``.
    """
    acf = stationary_acvf(params, 0)
    z_scale = np.sqrt(np.diag(acf.Sigma_Z[0]))
    if np.any(z_scale <= 0):
        raise ParameterError("a latent coordinate has zero variance")
    r = params.r
    y_scale = z_scale[:r]
    Lam = params.Lambda * y_scale[None, :] / z_scale[:, None]
    Lam[:r] = np.eye(r)
    Psi = [P * y_scale[None, :] / y_scale[:, None] for P in params.Psi]
    S_eta = params.Sigma_eta / np.outer(y_scale, y_scale)
    S_eps = params.Sigma_eps / np.outer(z_scale, z_scale)
    return DfmParams(Lam, Psi, S_eps, S_eta), z_scale, y_scale


def psd_factor(S: np.ndarray) -> np.ndarray:
    """``F`` with ``F F' = S`` for symmetric PSD ``S`` (Cholesky when possible)."""
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(0.5 * (S + S.T))
        return V * np.sqrt(np.clip(w, 0.0, None))[None, :]


@dataclass
class SimulatedData:
    X: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    z_scale: np.ndarray


def simulate_factors(Psi: list[np.ndarray], Sigma_eta: np.ndarray, T: int, burn_in: int, rng: np.random.Generator) -> np.ndarray:
    r = Sigma_eta.shape[0]
    p = len(Psi)
    F = psd_factor(Sigma_eta)
    n = T + burn_in
    eta = rng.standard_normal((n, r)) @ F.T
    Y = np.zeros((n + p, r))
    for t in range(p, n + p):
        acc = eta[t - p].copy()
        for k in range(p):
            acc += Psi[k] @ Y[t - k - 1]
        Y[t] = acc
    return Y[p + burn_in :]


def simulate(
    params: DfmParams,
    marginals: list[MarginalSpec],
    T: int,
    burn_in: int = BURN_IN,
    seed: int | np.random.Generator | None = None,
) -> SimulatedData:
    """Simulate ``(X, Z, Y)``.

    ``Z`` is rescaled entrywise to theoretical unit variance; ``Y`` is returned
    on the matching scale, so ``Z = Lambda* Y + eps*`` for the parameters of
    ``standardize(params)``.  Coordinates with zero variance are left at 0.
    """
    if len(marginals) != params.d:
        raise ParameterError(f"need {params.d} marginals, got {len(marginals)}")
    if T < 1 or burn_in < 0:
        raise ParameterError("T must be positive and burn_in nonnegative")
    if spectral_radius(companion(params.Psi)) >= 1.0:
        raise StabilityError("VAR is not stationary")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    Y = simulate_factors(params.Psi, params.Sigma_eta, T, burn_in, rng)
    eps = rng.standard_normal((T, params.d)) @ psd_factor(params.Sigma_eps).T
    Z = Y @ params.Lambda.T + eps
    sd = np.sqrt(np.diag(stationary_acvf(params, 0).Sigma_Z[0]))
    z_scale = np.where(sd > 0, sd, 1.0)
    Z = Z / z_scale
    Y = Y / z_scale[: params.r]
    X = np.empty((T, params.d), dtype=np.int64)
    for i, m in enumerate(marginals):
        X[:, i] = from_latent(m, Z[:, i])
    return SimulatedData(X=X, Z=Z, Y=Y, z_scale=z_scale)


def counts_from_uniform(marginals: list[MarginalSpec], Z: np.ndarray) -> np.ndarray:
    """``F_i^{-1}(Phi(Z_i))`` through the CDF route (used as a cross-check)."""
    U = ndtr(Z)
    return np.column_stack([quantile(m, U[:, i]) for i, m in enumerate(marginals)])


# ----------------------------------------------------------------------------
# simulation presets

PSI_PRESETS: dict[str, list[float]] = {
    "1": [0.7],
    "2": [-0.7],
    "3": [0.7, -0.4],
    "4": [0.7, -0.2, 0.3, -0.4],
}

FAMILY_PRESETS: dict[str, list[tuple]] = {
    "bernoulli": [(0.2,), (0.4,), (0.7,)],
    "poisson": [(0.1,), (1.0,), (10.0,)],
    "negbin": [(3, 0.2), (3, 0.4), (3, 0.7)],
}


def preset_psi(name: str, r: int) -> list[np.ndarray]:
    """Diagonal transition matrices; ``"1"``/``"2"`` are VAR(1) with +-0.7,
    ``"3"`` and ``"4"`` are VAR(2) and VAR(4) used for lag-order experiments."""
    try:
        diag = PSI_PRESETS[str(name)]
    except KeyError:
        raise ParameterError(f"unknown Psi preset {name!r}; choose from {sorted(PSI_PRESETS)}") from None
    return [c * np.eye(r) for c in diag]


def preset_marginals(family: str, d: int) -> list[MarginalSpec]:
    """``d`` series split into three (near) equal groups with increasing parameter."""
    fam = family.lower()
    if fam not in FAMILY_PRESETS:
        raise ParameterError(f"unknown family preset {family!r}")
    groups = np.array_split(np.arange(d), 3)
    out: list[MarginalSpec] = [None] * d  # type: ignore[list-item]
    for g, params in zip(groups, FAMILY_PRESETS[fam]):
        spec = MarginalSpec(fam, params)
        for i in g:
            out[i] = spec
    return out


def preset_params(psi: str, d: int, r: int, seed: int | np.random.Generator | None = None) -> DfmParams:
    """``Lambda_2`` entries drawn i.i.d. U(0,1); ``Sigma_eta = I_r``, ``Sigma_eps = I_d``."""
    if d <= r:
        raise ParameterError("need d > r")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    Lam = np.vstack([np.eye(r), rng.uniform(0.0, 1.0, size=(d - r, r))])
    return DfmParams(Lam, preset_psi(psi, r), np.eye(d), np.eye(r))
