"""Estimation losses, forecast error ratios, sensitivity and the two naive baselines."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..errors import DomainError


def _stack(estimates: Sequence, truth) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(truth, dtype=float)
    if len(estimates) == 0:
        raise DomainError("no estimates")
    E = np.stack([np.asarray(e, dtype=float) for e in estimates])
    if E.shape[1:] != a.shape:
        raise DomainError(f"estimate shape {E.shape[1:]} does not match truth {a.shape}")
    return E, a


def relative_loss(estimates: Sequence, truth) -> float:
    """``E||a_hat - a||_F / ||a||_F`` with the expectation over replications."""
    E, a = _stack(estimates, truth)
    na = np.linalg.norm(a.ravel())
    if na == 0:
        raise DomainError("relative loss is undefined for a zero parameter")
    return float(np.mean([np.linalg.norm((e - a).ravel()) for e in E]) / na)


def relative_bias(estimates: Sequence, truth) -> float:
    """``||mean(a_hat) - a||_1 / ||a||_1`` (entrywise 1-norms)."""
    E, a = _stack(estimates, truth)
    na = np.abs(a).sum()
    if na == 0:
        raise DomainError("relative bias is undefined for a zero parameter")
    return float(np.abs(E.mean(axis=0) - a).sum() / na)


def rmfe_latent(particles, truth, history) -> np.ndarray:
    """``RMFE(h)`` for a latent process.

    ``particles`` is ``(H, N, k)``, ``truth`` ``(H, k)`` and ``history`` ``(T, k)``.
    The particle average is the plain ``1/N`` mean.
    """
    P = np.asarray(particles, dtype=float)
    y = np.asarray(truth, dtype=float)
    hist = np.asarray(history, dtype=float)
    if P.ndim != 3 or y.shape != (P.shape[0], P.shape[2]) or hist.ndim != 2 or hist.shape[1] != P.shape[2]:
        raise DomainError("expected particles (H,N,k), truth (H,k) and history (T,k)")
    num = ((P - y[:, None, :]) ** 2).sum(axis=2).mean(axis=1)
    den = (hist**2).sum() / hist.shape[0]
    return np.sqrt(num / den)


def rmfe_counts(point, truth, history) -> np.ndarray:
    """``RMFE_X(h)``; the numerator has no ``1/d`` and neither does the denominator."""
    Xh = np.asarray(point, dtype=float)
    X = np.asarray(truth, dtype=float)
    hist = np.asarray(history, dtype=float)
    if Xh.shape != X.shape or hist.ndim != 2 or hist.shape[1] != X.shape[1]:
        raise DomainError("expected point (H,d), truth (H,d) and history (T,d)")
    num = ((Xh - X) ** 2).sum(axis=1)
    den = (hist**2).sum() / hist.shape[0]
    return np.sqrt(num / den)


def sensitivity(point, truth) -> np.ndarray:
    """Fraction of coordinates forecast exactly, per horizon."""
    Xh = np.asarray(point)
    X = np.asarray(truth)
    if Xh.shape != X.shape:
        raise DomainError("point forecast and truth shapes differ")
    return (Xh == X).mean(axis=1)


def last_baseline(history, H: int) -> np.ndarray:
    hist = np.asarray(history)
    return np.repeat(hist[-1:], H, axis=0)


def marginal_baseline(history, H: int) -> np.ndarray:
    """Per coordinate the most frequent value in ``history``; ties go to the smaller value."""
    hist = np.asarray(history)
    modes = np.empty(hist.shape[1], dtype=hist.dtype)
    for i in range(hist.shape[1]):
        vals, counts = np.unique(hist[:, i], return_counts=True)
        modes[i] = vals[np.argmax(counts)]  # unique sorts ascending, argmax takes the first
    return np.repeat(modes[None, :], H, axis=0)


@dataclass
class ForecastRecord:
    """One replication's forecast against its holdout.

    ``history`` is the estimation sample, ``window`` the observations the
    Marginal baseline looks at.  Particle arrays are ``(H, N, k)``.
    """

    point: np.ndarray
    holdout: np.ndarray
    history: np.ndarray
    window: np.ndarray
    Y_particles: np.ndarray | None = None
    Y_holdout: np.ndarray | None = None
    Y_history: np.ndarray | None = None
    Z_particles: np.ndarray | None = None
    Z_holdout: np.ndarray | None = None
    Z_history: np.ndarray | None = None


@dataclass
class MetricsReport:
    loss: dict[str, float] = field(default_factory=dict)
    bias: dict[str, float] = field(default_factory=dict)
    rmfe_y: np.ndarray | None = None
    rmfe_z: np.ndarray | None = None
    rmfe_x: np.ndarray | None = None
    sens: np.ndarray | None = None
    sens_last: np.ndarray | None = None
    sens_marginal: np.ndarray | None = None


def forecast_scores(rec: ForecastRecord) -> dict[str, np.ndarray]:
    """Per-horizon metrics of one replication."""
    H = rec.holdout.shape[0]
    if rec.point.shape != rec.holdout.shape:
        raise DomainError("point forecast and holdout shapes differ")
    out = {
        "rmfe_x": rmfe_counts(rec.point, rec.holdout, rec.history),
        "sens": sensitivity(rec.point, rec.holdout),
        "sens_last": sensitivity(last_baseline(rec.history, H), rec.holdout),
        "sens_marginal": sensitivity(marginal_baseline(rec.window, H), rec.holdout),
    }
    if rec.Y_particles is not None:
        out["rmfe_y"] = rmfe_latent(rec.Y_particles, rec.Y_holdout, rec.Y_history)
    if rec.Z_particles is not None:
        out["rmfe_z"] = rmfe_latent(rec.Z_particles, rec.Z_holdout, rec.Z_history)
    return out


def compute_metrics(
    estimates: Mapping[str, Sequence] | None = None,
    truths: Mapping[str, np.ndarray] | None = None,
    forecasts: Sequence[ForecastRecord] | None = None,
) -> MetricsReport:
    """Losses and biases per named parameter, and replication-averaged
    forecast metrics."""
    rep = MetricsReport()
    if estimates:
        truths = truths or {}
        missing = set(estimates) - set(truths)
        if missing:
            raise DomainError(f"no truth for {sorted(missing)}")
        for name, est in estimates.items():
            rep.loss[name] = relative_loss(est, truths[name])
            rep.bias[name] = relative_bias(est, truths[name])
    if forecasts:
        scores = [forecast_scores(f) for f in forecasts]
        for key in ("rmfe_y", "rmfe_z", "rmfe_x", "sens", "sens_last", "sens_marginal"):
            vals = [s[key] for s in scores if key in s]
            if vals:
                setattr(rep, key, np.mean(vals, axis=0))
    return rep
