"""Kalman recursions for the latent factor model in companion form.

State ``s_t = (Y_t, ..., Y_{t-p+1})``; ``s_t = Psi_c s_{t-1} + (eta_t, 0)`` and
``Z_t = Lambda_c s_t + eps_t`` with ``Lambda_c = [Lambda, 0]``.  Every routine
accepts a single state vector or a stack of them (leading particle axis); the
covariances never depend on the state, so they are computed once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericError, StabilityError
from .model import DfmParams, companion, spectral_radius, stationary_state_cov

SERIES_TOL = 1e-12
SERIES_CAP = 5000
JITTER = 1e-10


@dataclass(frozen=True)
class StateSpace:
    Psi_c: np.ndarray
    Lambda_c: np.ndarray
    Sigma_eta_c: np.ndarray
    Sigma_eps: np.ndarray
    Q0: np.ndarray
    r: int
    p: int

    @property
    def d(self) -> int:
        return self.Lambda_c.shape[0]

    @property
    def n_state(self) -> int:
        return self.Psi_c.shape[0]


@dataclass
class KalmanCovs:
    Q_pred: np.ndarray
    Q_filt: np.ndarray
    R_pred: np.ndarray
    K: np.ndarray
    converged: bool = False
    iterations: int = 0
    changes: list[float] = field(default_factory=list)


def _sym(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)


def stationary_q0(Psi_c: np.ndarray, Sigma_eta_c: np.ndarray, p: int) -> np.ndarray:
    """``Var(s_0)``.  VAR(1): partial sums of ``Psi^m Sigma_eta Psi'^m`` until a
    term falls below ``SERIES_TOL``; otherwise the companion Lyapunov solve."""
    if spectral_radius(Psi_c) >= 1.0:
        raise StabilityError("companion matrix has spectral radius >= 1")
    if p > 1:
        return stationary_state_cov(Psi_c, Sigma_eta_c)
    Q = Sigma_eta_c.copy()
    term = Sigma_eta_c.copy()
    for _ in range(SERIES_CAP):
        term = Psi_c @ term @ Psi_c.T
        Q += term
        if np.linalg.norm(term) < SERIES_TOL:
            break
    return _sym(Q)


def build_state_space(params: DfmParams) -> StateSpace:
    r, p, d = params.r, params.p, params.d
    Psi_c = companion(params.Psi)
    Lam_c = np.zeros((d, r * p))
    Lam_c[:, :r] = params.Lambda
    S_eta = np.zeros((r * p, r * p))
    S_eta[:r, :r] = params.Sigma_eta
    Q0 = stationary_q0(Psi_c, S_eta, p)
    return StateSpace(Psi_c, Lam_c, S_eta, params.Sigma_eps.copy(), Q0, r, p)


def _chol(R: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(R + JITTER * np.eye(R.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise NumericError("innovation covariance is not positive definite") from exc


def _use_woodbury(ss: StateSpace) -> bool:
    if ss.d <= 3 * ss.r:
        return False
    try:
        np.linalg.cholesky(ss.Sigma_eps)
    except np.linalg.LinAlgError:
        return False
    return True


def gain(ss: StateSpace, Q_pred: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Kalman gain ``Q Lambda_c' R^{-1}`` and ``R = Lambda_c Q Lambda_c' + Sigma_eps``.

    For ``d > 3r`` with positive definite ``Sigma_eps`` the solve goes through
    the push-through form of the Woodbury identity,
    ``Lambda' R^{-1} = (I + Lambda' S^{-1} Lambda Q_11)^{-1} Lambda' S^{-1}``,
    which only factors ``d x d`` once (``S``) and solves ``r x r`` systems.
    """
    r = ss.r
    Lam = ss.Lambda_c[:, :r]
    Q11 = Q_pred[:r, :r]
    R = _sym(Lam @ Q11 @ Lam.T + ss.Sigma_eps)
    if _use_woodbury(ss):
        Ls = np.linalg.cholesky(ss.Sigma_eps)
        W = np.linalg.solve(Ls, Lam)  # L_s^{-1} Lambda
        LtSinv = np.linalg.solve(Ls.T, W).T  # Lambda' S^{-1}
        M = np.eye(r) + W.T @ W @ Q11
        LtRinv = np.linalg.solve(M, LtSinv)
    else:
        C = _chol(R)
        tmp = np.linalg.solve(C, Lam)
        LtRinv = np.linalg.solve(C.T, tmp).T
    K = Q_pred[:, :r] @ LtRinv
    return K, R


def covariance_step(ss: StateSpace, Q_filt: np.ndarray) -> KalmanCovs:
    """Forecast and update of the covariance track only."""
    Q_pred = _sym(ss.Psi_c @ Q_filt @ ss.Psi_c.T + ss.Sigma_eta_c)
    K, R = gain(ss, Q_pred)
    Q_new = _sym((np.eye(ss.n_state) - K @ ss.Lambda_c) @ Q_pred)
    return KalmanCovs(Q_pred=Q_pred, Q_filt=Q_new, R_pred=R, K=K)


def initial_covs(ss: StateSpace) -> KalmanCovs:
    """Covariances at ``t = 0``: ``Q_filt = Var(s_0)``; the others are placeholders."""
    n = ss.n_state
    return KalmanCovs(Q_pred=ss.Q0.copy(), Q_filt=ss.Q0.copy(), R_pred=np.zeros((ss.d, ss.d)), K=np.zeros((n, ss.d)))


def kalman_step(ss: StateSpace, covs: KalmanCovs, y_filt: np.ndarray, z_obs: np.ndarray):
    """One forecast/update step.

    ``covs`` carries ``Q_filt`` from the previous step.  Returns
    ``(y_pred, z_pred, new_covs, y_filt_new)``; the state arguments may carry a
    leading particle axis.
    """
    new = covariance_step(ss, covs.Q_filt)
    y_pred = np.asarray(y_filt) @ ss.Psi_c.T
    z_pred = y_pred @ ss.Lambda_c.T
    y_new = y_pred + (np.asarray(z_obs) - z_pred) @ new.K.T
    return y_pred, z_pred, new, y_new


def dare_converge(ss: StateSpace, tol: float = 1e-12, max_iter: int = 1000) -> KalmanCovs:
    """Iterate the Riccati recursion for ``Q_{t+1|t}`` from ``Psi Q0 Psi' + Sigma_eta``.

    Stops when the Frobenius change falls below ``tol``; ``converged`` reports
    whether that happened within ``max_iter`` iterations.
    """
    Q = _sym(ss.Psi_c @ ss.Q0 @ ss.Psi_c.T + ss.Sigma_eta_c)
    I = np.eye(ss.n_state)
    changes: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        K, _ = gain(ss, Q)
        Q_new = _sym(ss.Psi_c @ ((I - K @ ss.Lambda_c) @ Q) @ ss.Psi_c.T + ss.Sigma_eta_c)
        delta = float(np.linalg.norm(Q_new - Q))
        changes.append(delta)
        Q = Q_new
        if delta < tol:
            converged = True
            break
    K, R = gain(ss, Q)
    Q_filt = _sym((I - K @ ss.Lambda_c) @ Q)
    return KalmanCovs(Q_pred=Q, Q_filt=Q_filt, R_pred=R, K=K, converged=converged, iterations=it, changes=changes)


def dare_residual(ss: StateSpace, Q: np.ndarray) -> float:
    K, _ = gain(ss, Q)
    rhs = ss.Psi_c @ ((np.eye(ss.n_state) - K @ ss.Lambda_c) @ Q) @ ss.Psi_c.T + ss.Sigma_eta_c
    return float(np.max(np.abs(rhs - Q)))


@dataclass
class HorizonPrediction:
    """Arrays indexed by ``h - 1``: states ``Y[h-1]`` (``(..., rp)``), ``Q[h-1]``,
    latent means ``Z[h-1]`` (``(..., d)``) and ``R[h-1]``."""

    Y: np.ndarray
    Q: np.ndarray
    Z: np.ndarray
    R: np.ndarray


def predict_horizon(ss: StateSpace, Q_filt: np.ndarray, y_filt: np.ndarray, H: int) -> HorizonPrediction:
    if H < 1:
        raise DomainError("H must be >= 1")
    y = np.asarray(y_filt, dtype=float)
    n = ss.n_state
    Ys = np.empty((H,) + y.shape)
    Qs = np.empty((H, n, n))
    Q = Q_filt
    for h in range(H):
        # Q_{T+h|T} = Psi Q_{T+h-1|T} Psi' + Sigma_eta unrolls to the closed form
        y = y @ ss.Psi_c.T
        Q = _sym(ss.Psi_c @ Q @ ss.Psi_c.T + ss.Sigma_eta_c)
        Ys[h] = y
        Qs[h] = Q
    Zs = Ys @ ss.Lambda_c.T
    Rs = np.einsum("ia,hab,jb->hij", ss.Lambda_c, Qs, ss.Lambda_c) + ss.Sigma_eps[None]
    Rs = 0.5 * (Rs + np.swapaxes(Rs, 1, 2))
    return HorizonPrediction(Y=Ys, Q=Qs, Z=Zs, R=Rs)
