"""Choosing the number of factors and the VAR lag order.

Rank: eigenvalue-gap (ED) with an iteratively calibrated threshold, three
information criteria on the residual latent correlation, and block
cross-validation of the PCA reconstruction.  Lag: four information criteria
on the innovation covariance and a block cross-validated prediction score.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import FoldDegeneracyError, ParameterError
from .estimation import (
    DEFAULT_R_NB,
    factor_lag_cov,
    fit_marginals,
    latent_correlations,
    pca_factor_estimate,
    sorted_eigh,
    yule_walker,
)
from .link import LinkBank, inverse_link_matrix
from .marginals import MarginalSpec

RANK_METHODS = ("ED", "IC1", "IC2", "IC3", "BCV_PC")
LAG_METHODS = ("AIC", "HQ", "SC", "FPE", "BCV")
DEFAULT_B = 5
ED_MAX_ITER = 20


@dataclass
class SelectionResult:
    method: str
    selected: int
    candidates: np.ndarray
    scores: np.ndarray
    fold_scores: np.ndarray | None = None
    notes: list[str] = field(default_factory=list)


# ----------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class BlockFolds:
    """``B`` contiguous blocks ``[start, end)`` covering ``0..T-1``; sizes differ by at most one."""

    T: int
    B: int

    def __post_init__(self):
        if self.B < 2:
            raise ParameterError("block cross-validation needs B >= 2")
        if self.T < self.B:
            raise ParameterError(f"cannot cut T={self.T} observations into {self.B} blocks")

    @property
    def blocks(self) -> list[tuple[int, int]]:
        sizes = np.full(self.B, self.T // self.B)
        sizes[: self.T % self.B] += 1
        ends = np.cumsum(sizes)
        return [(int(e - s), int(e)) for s, e in zip(sizes, ends)]

    def test(self, b: int) -> list[tuple[int, int]]:
        return [self.blocks[b]]

    def train(self, b: int) -> list[tuple[int, int]]:
        """Remaining blocks, merged where they touch, so the only breaks are at the held-out block."""
        segs = [blk for k, blk in enumerate(self.blocks) if k != b]
        merged: list[tuple[int, int]] = []
        for s, e in segs:
            if merged and merged[-1][1] == s:
                merged[-1] = (merged[-1][0], e)
            else:
                merged.append((s, e))
        return merged


def segment_cross_correlations(X, segments: Sequence[tuple[int, int]], max_lag: int) -> list[np.ndarray]:
    """Cross-correlations from the rows in ``segments``.

    The mean is pooled over all selected rows; lag-``h`` products only pair
    rows inside the same segment; every lag is divided by the number of
    selected rows.  With one segment spanning the sample this is the
    ordinary full-sample estimate.
    """
    X = np.asarray(X, dtype=float)
    rows = np.concatenate([np.arange(s, e) for s, e in segments])
    n = rows.size
    mean = X[rows].mean(axis=0)
    G = [np.zeros((X.shape[1], X.shape[1])) for _ in range(max_lag + 1)]
    for s, e in segments:
        Xc = X[s:e] - mean
        for h in range(min(max_lag, e - s - 1) + 1):
            G[h] += Xc[h:].T @ Xc[: e - s - h]
    var = np.diag(G[0]) / n
    if np.any(var <= 0):
        raise FoldDegeneracyError(-1, int(np.flatnonzero(var <= 0)[0]))
    sd = np.sqrt(var)
    out = [g / n / np.outer(sd, sd) for g in G]
    np.fill_diagonal(out[0], 1.0)
    out[0] = 0.5 * (out[0] + out[0].T)
    return out


def _segment_variances(X: np.ndarray, segments) -> np.ndarray:
    rows = np.concatenate([np.arange(s, e) for s, e in segments])
    return X[rows].var(axis=0)


@dataclass
class FoldMoments:
    """Latent correlations of one fold; ``keep`` marks the series that are used."""

    train: list[np.ndarray]
    test: list[np.ndarray]
    keep: np.ndarray


def fold_latent_correlations(
    X,
    marginals: list[MarginalSpec],
    folds: BlockFolds,
    max_lag: int,
    bank: LinkBank,
    degenerate: str = "error",
) -> list[FoldMoments]:
    """Train and test ``R_Z(0..max_lag)`` per fold, through the links of the
    full-sample marginals.

    A series that is constant on a fold's training rows or test block has no
    correlation there.  ``degenerate="error"`` raises; ``"drop"`` leaves that
    series out of that fold only.
    """
    if degenerate not in ("error", "drop"):
        raise ParameterError("degenerate must be 'error' or 'drop'")
    X = np.asarray(X, dtype=float)
    out = []
    for b in range(folds.B):
        keep = np.ones(X.shape[1], dtype=bool)
        for kind, segs in (("train", folds.train(b)), ("test", folds.test(b))):
            flat = _segment_variances(X, segs) <= 0
            if flat.any() and degenerate == "error":
                raise FoldDegeneracyError(b, int(np.flatnonzero(flat)[0]), kind)
            keep &= ~flat
        if keep.sum() < 2:
            raise FoldDegeneracyError(b, int(np.flatnonzero(~keep)[0]), "train/test")
        sub = [m for m, k in zip(marginals, keep) if k]
        Xk = X[:, keep]
        mats = []
        for segs in (folds.train(b), folds.test(b)):
            R_X = segment_cross_correlations(Xk, segs, max_lag)
            mats.append([inverse_link_matrix(R, sub, bank, lag0=(h == 0)) for h, R in enumerate(R_X)])
        out.append(FoldMoments(mats[0], mats[1], keep))
    return out


def _dropped_note(moments: list[FoldMoments]) -> list[str]:
    return [
        f"fold {b}: dropped constant series {np.flatnonzero(~fm.keep).tolist()}"
        for b, fm in enumerate(moments)
        if not fm.keep.all()
    ]


# ----------------------------------------------------------------------------
# rank


def ed_select(eigenvalues: np.ndarray, r_max: int) -> tuple[int, float, list[str]]:
    """Largest ``k <= r_max`` with ``e_k - e_{k+1} >= delta``.

    ``delta`` is twice the absolute slope of ``e_j, ..., e_{j+4}`` regressed on
    ``(j-1)^{2/3}, ..., (j+3)^{2/3}``, starting from ``j = r_max + 1`` and
    moving to ``j = r_hat + 1`` until ``j`` stops changing.
    """
    e = np.asarray(eigenvalues, dtype=float)
    d = e.size
    if r_max + 5 > d:
        raise ParameterError(f"ED needs r_max + 5 <= d, got r_max={r_max}, d={d}")
    notes: list[str] = []
    gaps = e[:r_max] - e[1 : r_max + 1]
    j = r_max + 1
    r_hat, delta = 0, 0.0
    for _ in range(ED_MAX_ITER):
        idx = np.arange(j, j + 5)  # 1-based eigenvalue positions
        x = (idx - 1.0) ** (2.0 / 3.0)
        slope = np.polyfit(x, e[idx - 1], 1)[0]
        delta = 2.0 * abs(slope)
        above = np.flatnonzero(gaps >= delta)
        r_hat = int(above[-1] + 1) if above.size else 0
        j_new = r_hat + 1
        if j_new == j:
            break
        j = j_new
    if r_hat == 0:
        msg = "ED found no eigenvalue gap above the threshold; using r = 1"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
        r_hat = 1
    return r_hat, delta, notes


def ic_penalty(which: str, d: int, T: int) -> float:
    dT, s = d * T, d + T
    c2 = min(d, T)
    if which == "IC1":
        return s / dT * np.log(dT / s)
    if which == "IC2":
        return s / dT * np.log(c2)
    if which == "IC3":
        return np.log(c2) / c2
    raise ParameterError(f"unknown criterion {which!r}")


def ic_rank_scores(R_Z0: np.ndarray, r_max: int, T: int, which: str) -> np.ndarray:
    """``ln(||Sigma_eps(q)||_F^2 / (d T)) + q g(d, T)`` for ``q = 1..r_max``."""
    d = R_Z0.shape[0]
    w, V = sorted_eigh(R_Z0)
    pen = ic_penalty(which, d, T)
    out = np.empty(r_max)
    for q in range(1, r_max + 1):
        resid = R_Z0 - (V[:, :q] * w[:q]) @ V[:, :q].T
        out[q - 1] = np.log(np.sum(resid**2) / (d * T)) + q * pen
    return out


def pc_reconstruction(R: np.ndarray, q: int) -> np.ndarray:
    """Rank-``q`` principal part plus the diagonal of the residual."""
    w, V = sorted_eigh(R)
    low = (V[:, :q] * w[:q]) @ V[:, :q].T
    return low + np.diag(np.diag(R - low))


def bcv_rank_scores(fold_pairs: Sequence[tuple[np.ndarray, np.ndarray]], r_max: int) -> np.ndarray:
    """``||R_test - recon_q(R_train)||_F^2`` per fold (rows) and ``q = 1..r_max`` (columns)."""
    out = np.empty((len(fold_pairs), r_max))
    for b, (train, test) in enumerate(fold_pairs):
        for q in range(1, r_max + 1):
            out[b, q - 1] = np.sum((test - pc_reconstruction(train, q)) ** 2)
    return out


def select_rank(
    X,
    families,
    method: str = "BCV_PC",
    r_max: int = 8,
    B: int = DEFAULT_B,
    *,
    r_nb: int = DEFAULT_R_NB,
    marginals: list[MarginalSpec] | None = None,
    bank: LinkBank | None = None,
    degenerate: str = "error",
) -> SelectionResult:
    method = method.upper()
    if method not in RANK_METHODS:
        raise ParameterError(f"rank method must be one of {RANK_METHODS}")
    X = np.asarray(X)
    T, d = X.shape
    if not 1 <= r_max < d:
        raise ParameterError(f"need 1 <= r_max < d, got r_max={r_max}, d={d}")
    marginals = fit_marginals(X, families, r_nb) if marginals is None else marginals
    bank = LinkBank() if bank is None else bank
    cand = np.arange(1, r_max + 1)
    if method == "BCV_PC":
        folds = BlockFolds(T, B)
        moments = fold_latent_correlations(X, marginals, folds, 0, bank, degenerate)
        fs = bcv_rank_scores([(fm.train[0], fm.test[0]) for fm in moments], r_max)
        scores = fs.mean(axis=0)
        return SelectionResult(method, int(cand[np.argmin(scores)]), cand, scores, fs, _dropped_note(moments))
    R0 = latent_correlations(X, marginals, 0, bank)[0]
    if method == "ED":
        w, _ = sorted_eigh(R0)
        r_hat, delta, notes = ed_select(w, r_max)
        gaps = w[:r_max] - w[1 : r_max + 1]
        return SelectionResult(method, r_hat, cand, gaps, None, notes + [f"delta={delta:.6g}"])
    scores = ic_rank_scores(R0, r_max, T, method)
    return SelectionResult(method, int(cand[np.argmin(scores)]), cand, scores)


# ----------------------------------------------------------------------------
# lag


def lag_penalty(which: str, l: int, r: int, T: int) -> float:
    if which == "AIC":
        return 2.0 * l * r * r / T
    if which == "HQ":
        return 2.0 * np.log(np.log(T)) * l * r * r / T
    if which == "SC":
        return np.log(T) * l * r * r / T
    if which == "FPE":
        return 2.0 * r * (r * l + 1) / T
    raise ParameterError(f"unknown criterion {which!r}")


def ic_lag_scores(Sigma_Y: Sequence[np.ndarray], p_max: int, T: int, which: str) -> tuple[np.ndarray, list[str]]:
    """``ln|Sigma_eta(l)| + penalty`` for ``l = 1..p_max``; NaN where the determinant is not positive."""
    r = Sigma_Y[0].shape[0]
    out = np.full(p_max, np.nan)
    notes: list[str] = []
    for l in range(1, p_max + 1):
        _, S_eta = yule_walker(Sigma_Y[: l + 1])
        sign, logdet = np.linalg.slogdet(S_eta)
        if sign <= 0:
            msg = f"lag {l}: innovation covariance has nonpositive determinant; skipped"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            notes.append(msg)
            continue
        out[l - 1] = logdet + lag_penalty(which, l, r, T)
    return out, notes


def _lag_block(Sigma_Y: Sequence[np.ndarray], l: int) -> tuple[np.ndarray, np.ndarray]:
    def lag(h: int) -> np.ndarray:
        return Sigma_Y[h] if h >= 0 else Sigma_Y[-h].T

    C = np.hstack([Sigma_Y[h] for h in range(1, l + 1)])
    Gam = np.block([[lag(h - k) for h in range(l)] for k in range(l)])
    return C, Gam


def bcv_lag_objective(Psi: Sequence[np.ndarray], Sigma_Y_test: Sequence[np.ndarray]) -> float:
    """``-2 psi' gamma + psi' Gamma psi`` with ``psi = vec[Psi_1..Psi_l]`` and the
    test-block moments; equals ``-2 tr(Phi C') + tr(Phi Gamma Phi')``."""
    l = len(Psi)
    Phi = np.hstack(Psi)
    C, Gam = _lag_block(Sigma_Y_test, l)
    return float(-2.0 * np.sum(Phi * C) + np.sum(Phi * (Phi @ Gam)))


def bcv_lag_scores(
    fold_sigmas: Sequence[tuple[Sequence[np.ndarray], Sequence[np.ndarray]]], p_max: int
) -> np.ndarray:
    """Per fold (rows) and ``l = 1..p_max`` (columns): transitions fitted on the
    training factor moments, scored on the test-block moments."""
    out = np.empty((len(fold_sigmas), p_max))
    for b, (train, test) in enumerate(fold_sigmas):
        for l in range(1, p_max + 1):
            Psi, _ = yule_walker(train[: l + 1])
            out[b, l - 1] = bcv_lag_objective(Psi, test)
    return out


def select_lag(
    X,
    families,
    r: int,
    method: str = "BCV",
    p_max: int = 6,
    B: int = DEFAULT_B,
    *,
    r_nb: int = DEFAULT_R_NB,
    marginals: list[MarginalSpec] | None = None,
    bank: LinkBank | None = None,
    degenerate: str = "error",
) -> SelectionResult:
    method = method.upper()
    if method not in LAG_METHODS:
        raise ParameterError(f"lag method must be one of {LAG_METHODS}")
    X = np.asarray(X)
    T, d = X.shape
    if not 1 <= p_max < T / 4:
        raise ParameterError(f"need 1 <= p_max < T/4, got p_max={p_max}, T={T}")
    marginals = fit_marginals(X, families, r_nb) if marginals is None else marginals
    bank = LinkBank() if bank is None else bank
    cand = np.arange(1, p_max + 1)
    if method == "BCV":
        folds = BlockFolds(T, B)
        moments = fold_latent_correlations(X, marginals, folds, p_max, bank, degenerate)
        sig = []
        for fm in moments:
            split = pca_factor_estimate(fm.train[0], r)
            Lam = split.Lambda
            s_train = [split.Sigma_Y0] + [factor_lag_cov(Lam, R) for R in fm.train[1:]]
            s_test = [factor_lag_cov(Lam, R) for R in fm.test]
            sig.append((s_train, s_test))
        fs = bcv_lag_scores(sig, p_max)
        scores = fs.sum(axis=0)
        return SelectionResult(method, int(cand[np.argmin(scores)]), cand, scores, fs, _dropped_note(moments))
    R_Z = latent_correlations(X, marginals, p_max, bank)
    split = pca_factor_estimate(R_Z[0], r)
    S_Y = [split.Sigma_Y0] + [factor_lag_cov(split.Lambda, R) for R in R_Z[1:]]
    scores, notes = ic_lag_scores(S_Y, p_max, T, method)
    if np.all(np.isnan(scores)):
        raise ParameterError("no lag candidate has a positive definite innovation covariance")
    return SelectionResult(method, int(cand[np.nanargmin(scores)]), cand, scores, None, notes)
