"""Particle forecasting: SIS/R over the observation window, then h-step count pmfs.

Each observation ``x_t`` restricts the latent ``Z_t`` to a box ``A_{x_t}``.
Particles carry filtered factor states; at each step the predicted latent
``N(Z_hat^(k), R_hat)`` is weighted by its box probability and a draw from it,
truncated to the box, feeds the Kalman update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr, logsumexp, ndtr, ndtri_exp
from scipy.stats import qmc

from .errors import DegenerateBinError, DomainError, NumericError, ParameterError, WeightDegeneracyError
from .estimation import FittedModel
from .kalman import KalmanCovs, StateSpace, build_state_space, covariance_step, predict_horizon
from .marginals import bin_bounds, bin_table

DEFAULT_N = 1000
DEFAULT_WINDOW = 10
DEFAULT_SWEEPS = 10
DEFAULT_QMC = 2**13
RESAMPLE_FRACTION = 0.5
COV_TOL = 1e-12
QMC_CHUNK = 2**21


# ----------------------------------------------------------------------------
# one-dimensional truncated normal pieces


def log_interval_mass(lo, hi):
    """``log(Phi(hi) - Phi(lo))`` without cancellation in either tail; ``-inf``
    for empty intervals."""
    lo, hi = np.broadcast_arrays(np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))
    flip = lo > 0
    a = np.where(flip, -hi, lo)
    b = np.where(flip, -lo, hi)
    lb, la = log_ndtr(b), log_ndtr(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = lb + np.log1p(-np.exp(la - lb))
    return np.where(b > a, np.nan_to_num(out, nan=-np.inf), -np.inf)


def interval_mass(lo, hi):
    """``Phi(hi) - Phi(lo)`` without cancellation in either tail."""
    return np.exp(log_interval_mass(lo, hi))


def truncnorm_inverse(lo, hi, w):
    """Standard normal quantile at relative position ``w`` within ``(lo, hi]``.

    Intervals in the upper tail are mirrored so the arithmetic always happens
    in the lower tail, on the log scale.
    """
    lo, hi, w = np.broadcast_arrays(np.asarray(lo, float), np.asarray(hi, float), np.asarray(w, float))
    flip = lo > 0
    a = np.where(flip, -hi, lo)
    b = np.where(flip, -lo, hi)
    v = np.where(flip, 1.0 - w, w)
    lb, la = log_ndtr(b), log_ndtr(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_u = lb + np.log(v + (1.0 - v) * np.exp(la - lb))
        x = ndtri_exp(np.minimum(log_u, 0.0))
    x = np.clip(np.nan_to_num(x, nan=0.0), a, b)
    return np.where(flip, -x, x)


# ----------------------------------------------------------------------------
# rectangle probabilities


def _sym_chol(cov: np.ndarray) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    if np.linalg.eigvalsh(cov).min() < -1e-10 * max(1.0, np.abs(cov).max()):
        raise NumericError("covariance is not positive semidefinite")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return np.linalg.cholesky(cov + 1e-12 * np.eye(cov.shape[0]) * max(1.0, np.trace(cov)))


def rectangle_log_probs(
    means: np.ndarray, cov: np.ndarray, lo: np.ndarray, hi: np.ndarray, points: np.ndarray
) -> np.ndarray:
    """Genz separation-of-variables estimate of ``log P(N(m_k, cov) in (lo, hi])``
    for each row ``m_k`` of ``means``, averaging over the given points in
    ``[0,1)^d`` (shared by all rows).  Products of the one-dimensional masses
    are kept on the log scale, so boxes far in the tail do not underflow."""
    means = np.atleast_2d(means)
    N, d = means.shape
    C = _sym_chol(cov)
    diag = np.diag(C)
    out = np.empty(N)
    n_pts = points.shape[0]
    chunk = max(1, QMC_CHUNK // max(1, n_pts * d))
    for s in range(0, N, chunk):
        m = means[s : s + chunk]
        a = (lo - m)[:, None, :]  # (n, 1, d)
        b = (hi - m)[:, None, :]
        n = m.shape[0]
        y = np.zeros((n, n_pts, d))
        logp = np.zeros((n, n_pts))
        for i in range(d):
            shift = y[:, :, :i] @ C[i, :i] if i else 0.0
            ai = (a[:, :, i] - shift) / diag[i]
            bi = (b[:, :, i] - shift) / diag[i]
            logp += log_interval_mass(ai, bi)
            if i < d - 1:
                y[:, :, i] = truncnorm_inverse(ai, bi, points[None, :, i])
        out[s : s + chunk] = logsumexp(logp, axis=1) - np.log(n_pts)
    return out


def rectangle_probs(means: np.ndarray, cov: np.ndarray, lo: np.ndarray, hi: np.ndarray, points: np.ndarray) -> np.ndarray:
    return np.exp(rectangle_log_probs(means, cov, lo, hi, points))


def qmc_points(d: int, n_qmc: int, seed) -> np.ndarray:
    m = int(np.ceil(np.log2(max(2, n_qmc))))
    return qmc.Sobol(d=d, scramble=True, seed=seed).random_base2(m)[:n_qmc]


def mvn_rectangle_prob(mean, cov, lo, hi, n_qmc: int = DEFAULT_QMC, seed=None) -> float:
    """``P(N(mean, cov) in prod (lo_j, hi_j])`` by randomized QMC."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    lo = np.broadcast_to(np.asarray(lo, dtype=float), mean.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=float), mean.shape)
    if np.any(hi < lo):
        raise DomainError("need lo <= hi")
    pts = qmc_points(mean.size, n_qmc, seed)
    return float(rectangle_probs(mean[None, :], cov, lo, hi, pts)[0])


# ----------------------------------------------------------------------------
# truncated multivariate normal


def _conditional_weights(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For ``Z_i | Z_{-i}``: regression weights (zero diagonal) and conditional sds."""
    try:
        P = np.linalg.inv(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericError("covariance is singular") from exc
    pd = np.diag(P)
    if np.any(pd <= 0):
        raise NumericError("covariance is not positive definite")
    W = -P / pd[:, None]
    np.fill_diagonal(W, 0.0)
    return W, 1.0 / np.sqrt(pd)


def gibbs_truncated(
    means: np.ndarray, cov: np.ndarray, lo: np.ndarray, hi: np.ndarray, sweeps: int, rng: np.random.Generator
) -> np.ndarray:
    """Coordinate-wise Gibbs draws from ``N(m_k, cov)`` restricted to ``(lo, hi]``,
    one chain per row of ``means``, started at the mean projected onto the box."""
    means = np.atleast_2d(means)
    if np.any(~(hi > lo)):
        raise DegenerateBinError("box is empty")
    W, sd = _conditional_weights(cov)
    z = np.clip(means, lo, hi)
    # infinite sides can leave the start at +-inf only if the mean was infinite
    z = np.where(np.isfinite(z), z, np.where(np.isfinite(lo), lo, hi))
    d = means.shape[1]
    for _ in range(sweeps):
        for i in range(d):
            cm = means[:, i] + (z - means) @ W[i]
            a = (lo[i] - cm) / sd[i]
            b = (hi[i] - cm) / sd[i]
            z[:, i] = cm + sd[i] * truncnorm_inverse(a, b, rng.random(means.shape[0]))
    return np.clip(z, lo, hi)


def sample_truncated_mvn(mean, cov, lo, hi, sweeps: int = DEFAULT_SWEEPS, seed=None) -> np.ndarray:
    """One draw of ``N(mean, cov)`` conditioned on ``lo < Z <= hi``."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    lo = np.broadcast_to(np.asarray(lo, dtype=float), mean.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=float), mean.shape)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return gibbs_truncated(mean[None, :], cov, lo, hi, sweeps, rng)[0]


# ----------------------------------------------------------------------------
# weights and resampling


def ess(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w))


def resample(weights, strategy: str = "systematic", seed=None) -> np.ndarray:
    """Ancestor indices (0-based).  Systematic: one uniform ``U_1 ~ U(0, 1/N)``
    and ``U_k = U_1 + (k-1)/N``; particle ``j`` is picked for every ``U_k`` in
    ``(C_{j-1}, C_j]`` of the cumulative weights."""
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if not total > 0 or not np.isfinite(total):
        raise WeightDegeneracyError("all particle weights are zero")
    w = w / total
    N = w.size
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if strategy == "systematic":
        u = (rng.random() + np.arange(N)) / N
        c = np.cumsum(w)
        c[-1] = 1.0
        return np.minimum(np.searchsorted(c, u, side="left"), N - 1)
    if strategy == "multinomial":
        return rng.choice(N, size=N, p=w)
    raise ParameterError(f"unknown resampling strategy {strategy!r}")


# ----------------------------------------------------------------------------
# SIS/R


@dataclass
class ParticleEnsemble:
    states: np.ndarray  # (N, rp) filtered factor states
    latents: np.ndarray  # (N, d) latent draws at the last step
    weights: np.ndarray
    covs: KalmanCovs
    ss: StateSpace
    ess_history: list[float] = field(default_factory=list)
    resampled: list[bool] = field(default_factory=list)

    @property
    def N(self) -> int:
        return self.weights.size


def observation_box(model: FittedModel, x) -> tuple[np.ndarray, np.ndarray]:
    lo = np.empty(model.d)
    hi = np.empty(model.d)
    for i, m in enumerate(model.marginals):
        lo[i], hi[i] = bin_bounds(m, int(x[i]))
    if np.any(~(hi > lo)):
        raise DegenerateBinError(f"observation {list(x)} has an empty latent box")
    return lo, hi


def run_sisr(
    X_window,
    model: FittedModel,
    N: int = DEFAULT_N,
    seed=None,
    *,
    sweeps: int = DEFAULT_SWEEPS,
    n_qmc: int = DEFAULT_QMC,
    resample_fraction: float = RESAMPLE_FRACTION,
    resample_below: bool = True,
    strategy: str = "systematic",
    ss: StateSpace | None = None,
) -> ParticleEnsemble:
    """Filter the window with ``N`` particles.

    The filter starts from the stationary law: every particle has
    ``Y_{0|0} = 0`` with covariance ``Q0``.  Covariances are shared by all
    particles and stop being recomputed once they reach their Riccati fixed
    point.  Resampling fires when ``ESS < resample_fraction * N`` (or above
    it, with ``resample_below=False``).  Three independent streams are
    spawned from ``seed``: truncated-normal draws, QMC randomization and
    resampling.
    """
    X_window = np.atleast_2d(np.asarray(X_window))
    if X_window.shape[0] < 1 or X_window.shape[1] != model.d:
        raise DomainError(f"window must be W x {model.d} with W >= 1")
    if N < 1:
        raise DomainError("N must be >= 1")
    ss = build_state_space(model.forecast_params()) if ss is None else ss
    ss_seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_draw, s_qmc, s_res = ss_seq.spawn(3)
    rng_draw = np.random.default_rng(s_draw)
    rng_res = np.random.default_rng(s_res)
    qmc_seeds = s_qmc.spawn(X_window.shape[0])

    states = np.zeros((N, ss.n_state))
    weights = np.full(N, 1.0 / N)
    Q_filt = ss.Q0.copy()
    covs: KalmanCovs | None = None
    frozen = False
    ess_hist: list[float] = []
    res_hist: list[bool] = []
    latents = np.zeros((N, ss.d))
    for t, x in enumerate(X_window):
        if not frozen:
            new = covariance_step(ss, Q_filt)
            frozen = covs is not None and np.linalg.norm(new.Q_pred - covs.Q_pred) < COV_TOL
            covs = new
            Q_filt = covs.Q_filt
        lo, hi = observation_box(model, x)
        y_pred = states @ ss.Psi_c.T
        z_pred = y_pred @ ss.Lambda_c.T
        pts = qmc_points(ss.d, n_qmc, np.random.default_rng(qmc_seeds[t]))
        log_incr = rectangle_log_probs(z_pred, covs.R_pred, lo, hi, pts)
        latents = gibbs_truncated(z_pred, covs.R_pred, lo, hi, sweeps, rng_draw)
        if np.any(latents < lo) or np.any(latents > hi):
            raise NumericError("a particle left its observation box")
        with np.errstate(divide="ignore"):
            logw = np.log(weights) + log_incr
        top = logw.max()
        if not np.isfinite(top):
            raise WeightDegeneracyError(f"particle weights vanished at step {t + 1}; increase N")
        w = np.exp(logw - top)
        weights = w / w.sum()
        e = ess(weights)
        ess_hist.append(e)
        fire = e < resample_fraction * N if resample_below else e > resample_fraction * N
        if fire and N > 1:
            idx = resample(weights, strategy, rng_res)
            y_pred, z_pred, latents = y_pred[idx], z_pred[idx], latents[idx]
            weights = np.full(N, 1.0 / N)
        res_hist.append(bool(fire and N > 1))
        states = y_pred + (latents - z_pred) @ covs.K.T
    return ParticleEnsemble(states, latents, weights, covs, ss, ess_hist, res_hist)


# ----------------------------------------------------------------------------
# forecast distributions


@dataclass
class ForecastDistribution:
    """``pmf[i][h-1, k]`` is the probability that coordinate ``i`` equals
    ``support[i][k]`` at horizon ``h``.  ``raw_pmf`` keeps the values before
    unobserved counts were dropped."""

    support: list[np.ndarray]
    pmf: list[np.ndarray]
    raw_support: list[np.ndarray]
    raw_pmf: list[np.ndarray]

    @property
    def H(self) -> int:
        return self.pmf[0].shape[0]

    @property
    def d(self) -> int:
        return len(self.pmf)


def forecast_distribution(
    ensemble: ParticleEnsemble, model: FittedModel, H: int, exclude_unobserved: bool = True
) -> ForecastDistribution:
    pred = predict_horizon(ensemble.ss, ensemble.covs.Q_filt, ensemble.states, H)
    w = ensemble.weights
    supports, pmfs, raw_s, raw_p = [], [], [], []
    for i, m in enumerate(model.marginals):
        values, lo, hi = bin_table(m)
        edges = np.append(lo, np.inf)
        s = np.sqrt(pred.R[:, i, i])  # (H,)
        zi = pred.Z[:, :, i]  # (H, N)
        # weighted CDF of the mixture at each bin edge, then differences
        arg = (edges[None, None, :] - zi[:, :, None]) / s[:, None, None]
        cdf = np.einsum("k,hke->he", w, ndtr(arg))
        probs = np.diff(cdf, axis=1)
        probs = np.clip(probs, 0.0, None)
        raw_s.append(values)
        raw_p.append(probs)
        keep = np.ones(values.size, dtype=bool)
        if exclude_unobserved and model.observed_support is not None:
            keep = np.isin(values, model.observed_support[i])
            if not keep.any():
                keep[:] = True
        sub = probs[:, keep]
        tot = sub.sum(axis=1, keepdims=True)
        supports.append(values[keep])
        pmfs.append(np.where(tot > 0, sub / np.where(tot > 0, tot, 1.0), 1.0 / keep.sum()))
    return ForecastDistribution(supports, pmfs, raw_s, raw_p)


def point_forecast(dist: ForecastDistribution) -> np.ndarray:
    """Per coordinate and horizon the most probable count; ties go to the smaller count."""
    out = np.empty((dist.H, dist.d), dtype=np.int64)
    for i in range(dist.d):
        out[:, i] = dist.support[i][np.argmax(dist.pmf[i], axis=1)]
    return out
