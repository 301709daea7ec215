"""Link functions between latent Gaussian and count correlations, and their numerical inverse.

``corr(G_i(Z_1), G_j(Z_2)) = L_ij(corr(Z_1, Z_2))`` with
``L_ij(u) = sum_k k! g_{i,k} g_{j,k} / (sd_i sd_j) u^k``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_banded

from .errors import DegenerateMarginalError, DomainError, LinkMonotonicityError, ParameterError
from .marginals import DEFAULT_K, HermiteCoeffs, MarginalSpec, hermite_coefficients

DEFAULT_M = 200
FLAT_TOL = 1e-6


@dataclass(frozen=True)
class LinkFunction:
    """``L(u) = sum_{k=1..K} l_k u^k`` with an exact evaluation near ``u = +-1``.

    ``coeffs[k-1]`` holds ``l_k``.  Step-function marginals have Hermite
    coefficients that decay only polynomially, so the truncated series
    oscillates (and stops being monotone) close to the ends of ``[-1, 1]``.
    For ``|u| > switch`` the link is continued from the series value at
    ``+-switch`` by integrating its exact derivative,
    ``L'(s) = (sd_i sd_j)^{-1} sum_{m,n} phi_2(a_m, b_n; s)``, over the
    threshold tables ``a``, ``b``.  The derivative is a sum of bivariate normal
    densities, hence positive, and the quadrature keeps it so.  Without
    thresholds (``a`` is None) the plain truncated series is used everywhere.
    """

    coeffs: np.ndarray
    rho_minus: float
    rho_plus: float
    switch: float = 1.0
    a: np.ndarray | None = None
    b: np.ndarray | None = None
    scale: float = 1.0
    knot_values: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def K(self) -> int:
        return self.coeffs.size

    def __call__(self, u):
        return link_eval(self, u)


def attainable_bounds(si: MarginalSpec, sj: MarginalSpec) -> tuple[float, float]:
    """``(corr(G_i(Z), G_j(-Z)), corr(G_i(Z), G_j(Z)))`` in closed form, by summing
    ``E[XY] = sum_{m,n>=0} P(X > m, Y > n)`` over the CDF tables."""
    sfi = si.sf(np.arange(0, si.n_max + 1))
    sfj = sj.sf(np.arange(0, sj.n_max + 1))
    a, b = np.meshgrid(sfi, sfj, indexing="ij")
    e_plus = np.minimum(a, b).sum()
    e_minus = np.maximum(a + b - 1.0, 0.0).sum()
    mi, mj = sfi.sum(), sfj.sum()
    sd = np.sqrt(si.var * sj.var)
    return float((e_minus - mi * mj) / sd), float((e_plus - mi * mj) / sd)


def _series(coeffs: np.ndarray, u: np.ndarray) -> np.ndarray:
    acc = np.zeros_like(u)
    for c in coeffs[::-1]:
        acc = acc * u + c
    return acc * u


def _series_slope(coeffs: np.ndarray, u: np.ndarray) -> np.ndarray:
    kc = coeffs * np.arange(1, coeffs.size + 1)
    acc = np.zeros_like(u)
    for c in kc[::-1]:
        acc = acc * u + c
    return acc


_GL_X, _GL_W = np.polynomial.legendre.leggauss(4)
_PANEL = np.pi / DEFAULT_M
_GRADE_START, _GRADE_RATIO, _GRADE_STEPS = 0.1, 0.6, 40


def _slope_theta(a: np.ndarray, b: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """``sum_{m,n} phi_2(a_m, b_n; sin t) cos t`` at each ``t`` in ``theta``."""
    s = np.sin(theta)[:, None, None]
    c2 = np.cos(theta)[:, None, None] ** 2
    A = a[None, :, None]
    B = b[None, None, :]
    # a^2 + b^2 - 2sab split so that 1 -+ s is never formed by cancellation
    # (sin rounds to +-1 well before cos reaches 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(
            s >= 0,
            (A - B) ** 2 / (2.0 * c2) + A * B / (1.0 + s),
            (A + B) ** 2 / (2.0 * c2) - A * B / (1.0 - s),
        )
    # cos(theta) = 0 exactly: the density collapses onto a = b, contributing nothing
    q = np.where(c2 > 0, q, np.inf)
    return np.exp(-q).sum(axis=(1, 2)) / (2.0 * np.pi)


def _tail(link: LinkFunction, u: np.ndarray, sign: float) -> np.ndarray:
    """Values at ``sign * u`` (``u > switch``) by integrating the exact slope
    outward from ``sign * switch``."""
    t0 = np.arcsin(link.switch)
    tt = np.arcsin(np.minimum(u, 1.0))
    # near u = +-1 terms with a_m = -b_n (or a_m = b_n) turn into spikes whose
    # width in theta is about |a_m +- b_n|, so the panels are graded geometrically
    # towards pi/2
    grid = np.arange(t0, np.pi / 2 - _GRADE_START, _PANEL)
    grid = np.concatenate([grid, np.pi / 2 - _GRADE_START * _GRADE_RATIO ** np.arange(_GRADE_STEPS)])
    bps = np.unique(np.concatenate([grid, tt, [t0]]))
    lo, hi = bps[:-1], bps[1:]
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    nodes = (mid[:, None] + half[:, None] * _GL_X[None, :]).ravel()
    chunk = max(1, int(4e6 // max(1, link.a.size * link.b.size)))
    vals = np.concatenate(
        [_slope_theta(link.a, link.b, sign * nodes[i : i + chunk]) for i in range(0, nodes.size, chunk)]
    )
    panel = (vals.reshape(-1, _GL_X.size) * _GL_W).sum(axis=1) * half
    cum = np.concatenate([[0.0], np.cumsum(panel)])
    at = cum[np.searchsorted(bps, tt)]
    base = float(_series(link.coeffs, np.array(sign * link.switch)))
    return base + sign * at / link.scale


def _choose_switch(coeffs: np.ndarray) -> float:
    for sw in (0.8, 0.7, 0.6, 0.5, 0.4, 0.3):
        grid = np.linspace(-sw, sw, 801)
        if np.all(_series_slope(coeffs, grid) > 0):
            return sw
    raise LinkMonotonicityError("truncated link series is not increasing near 0")


def build_link(gi: HermiteCoeffs, gj: HermiteCoeffs) -> LinkFunction:
    if gi.truncation_K != gj.truncation_K:
        raise ParameterError("Hermite coefficient sets must share the truncation K")
    if gi.variance <= 0 or gj.variance <= 0:
        raise DegenerateMarginalError("zero-variance marginal has no link function")
    K = gi.truncation_K
    coeffs = gi.scaled[1:] * gj.scaled[1:] / np.sqrt(gi.variance * gj.variance)
    if gi.spec is None or gj.spec is None:
        signs = (-1.0) ** np.arange(1, K + 1)
        return LinkFunction(coeffs, float(np.dot(coeffs, signs)), float(coeffs.sum()))
    a = gi.spec.thresholds
    b = gj.spec.thresholds
    link = LinkFunction(
        coeffs=coeffs,
        rho_minus=-1.0,
        rho_plus=1.0,
        switch=_choose_switch(coeffs),
        a=a[np.isfinite(a)],
        b=b[np.isfinite(b)],
        scale=float(np.sqrt(gi.variance * gj.variance)),
    )
    # values on the default inversion grid are kept; they include both ends
    v = link_eval(link, chebyshev_grid(DEFAULT_M))
    return replace(link, rho_minus=float(v[0]), rho_plus=float(v[-1]), knot_values=v)


def link_between(si: MarginalSpec, sj: MarginalSpec, K: int = DEFAULT_K) -> LinkFunction:
    return build_link(hermite_coefficients(si, K), hermite_coefficients(sj, K))


def link_eval(link: LinkFunction, u):
    """Horner evaluation of the series on ``|u| <= switch``, exact continuation beyond."""
    u = np.asarray(u, dtype=float)
    if np.any(np.abs(u) > 1.0 + 1e-12):
        raise DomainError("link functions are defined on [-1, 1]")
    scalar = u.ndim == 0
    u = np.atleast_1d(np.clip(u, -1.0, 1.0))
    out = _series(link.coeffs, u)
    if link.a is not None:
        for sign in (1.0, -1.0):
            mask = sign * u > link.switch
            if np.any(mask):
                out[mask] = _tail(link, sign * u[mask], sign)
    return float(out[0]) if scalar else out


# ----------------------------------------------------------------------------
# natural cubic spline inverse


@dataclass(frozen=True)
class InverseLinkTable:
    """Natural cubic spline through the points ``(v_m, u_m)``, ``v_m = L(u_m)``.

    ``second`` holds the spline second derivatives at the knots (zero at both
    ends).  Outside ``[v_0, v_M]`` the inverse is clamped to -1 / +1.
    """

    knots_v: np.ndarray
    knots_u: np.ndarray
    second: np.ndarray

    def __call__(self, v):
        return inverse_eval(self, v)


def chebyshev_grid(M: int) -> np.ndarray:
    return -np.cos(np.pi * np.arange(M + 1) / M)


def natural_spline_second_derivatives(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Solve the symmetric tridiagonal system for the knot second derivatives."""
    h = np.diff(x)
    n = x.size
    a = np.zeros(n)
    if n < 3:
        return a
    rhs = 6.0 * (np.diff(y[1:]) / h[1:] - np.diff(y[:-1]) / h[:-1])
    ab = np.zeros((3, n - 2))
    ab[0, 1:] = h[1:-1]
    ab[1, :] = 2.0 * (h[:-1] + h[1:])
    ab[2, :-1] = h[1:-1]
    a[1:-1] = solve_banded((1, 1), ab, rhs)
    return a


def build_inverse(link: LinkFunction, M: int = DEFAULT_M) -> InverseLinkTable:
    if M < 10:
        raise ParameterError("inverse link grid needs M >= 10")
    u = chebyshev_grid(M)
    if link.knot_values is not None and link.knot_values.size == M + 1:
        v = link.knot_values
    else:
        v = np.asarray(link_eval(link, u))
    # Near +-1 the link flattens out (super-exponentially when the thresholds
    # differ), and a cubic through knots whose v-gaps shrink by orders of
    # magnitude oscillates wildly.  Knots at the ends whose gap falls below a
    # small fraction of the average gap are dropped; values beyond the last
    # kept knot clamp as usual.
    step = np.diff(v) > FLAT_TOL * (v[-1] - v[0]) / M
    if not step.all():
        first, last = int(np.argmax(step)), step.size - int(np.argmax(step[::-1]))
        u, v = u[first : last + 1], v[first : last + 1]
    if np.any(np.diff(v) <= 0.0):
        bad = int(np.argmin(np.diff(v)))
        raise LinkMonotonicityError(f"link is not increasing between u={u[bad]:.6f} and u={u[bad + 1]:.6f}")
    return InverseLinkTable(knots_v=v, knots_u=u, second=natural_spline_second_derivatives(v, u))


def inverse_eval(table: InverseLinkTable, v):
    v = np.asarray(v, dtype=float)
    x, y, a = table.knots_v, table.knots_u, table.second
    m = np.clip(np.searchsorted(x, v, side="right"), 1, x.size - 1)
    x0, x1 = x[m - 1], x[m]
    h = x1 - x0
    left, right = x1 - v, v - x0
    out = (
        a[m - 1] * left**3 / (6 * h)
        + a[m] * right**3 / (6 * h)
        + (y[m] / h - a[m] * h / 6) * right
        + (y[m - 1] / h - a[m - 1] * h / 6) * left
    )
    out = np.where(v < x[0], -1.0, np.where(v > x[-1], 1.0, out))
    out = np.clip(out, -1.0, 1.0)
    return out if out.ndim else float(out)


# ----------------------------------------------------------------------------
# per-pair cache and matrix inversion


@dataclass(frozen=True)
class LinkPair:
    link: LinkFunction
    inverse: InverseLinkTable


class LinkBank:
    """Links keyed by the pair of marginal parameters, built at most once per key.

    Simulations reuse a handful of distinct marginals across many series, so the
    number of distinct pairs stays small even for large ``d``.
    """

    def __init__(self, K: int = DEFAULT_K, M: int = DEFAULT_M):
        self.K = K
        self.M = M
        self._hermite: dict[tuple, HermiteCoeffs] = {}
        self._pairs: dict[tuple, LinkPair] = {}
        self._lock = threading.Lock()

    def hermite(self, spec: MarginalSpec) -> HermiteCoeffs:
        key = spec.key()
        hc = self._hermite.get(key)
        if hc is None:
            hc = hermite_coefficients(spec, self.K)
            with self._lock:
                hc = self._hermite.setdefault(key, hc)
        return hc

    def pair(self, si: MarginalSpec, sj: MarginalSpec) -> LinkPair:
        # L_ij = L_ji, so one entry serves both orders
        ki, kj = si.key(), sj.key()
        if kj < ki:
            si, sj, ki, kj = sj, si, kj, ki
        key = (ki, kj)
        lp = self._pairs.get(key)
        if lp is None:
            link = build_link(self.hermite(si), self.hermite(sj))
            lp = LinkPair(link, build_inverse(link, self.M))
            with self._lock:
                lp = self._pairs.setdefault(key, lp)
        return lp

    def __len__(self) -> int:
        return len(self._pairs)


def _pair_groups(marginals) -> dict[tuple, tuple[np.ndarray, np.ndarray]]:
    keys = [m.key() for m in marginals]
    groups: dict[tuple, list[tuple[int, int]]] = {}
    for i in range(len(keys)):
        for j in range(len(keys)):
            k = (keys[i], keys[j]) if keys[i] <= keys[j] else (keys[j], keys[i])
            groups.setdefault(k, []).append((i, j))
    return {k: (np.array([p[0] for p in v]), np.array([p[1] for p in v])) for k, v in groups.items()}


def link_matrix(marginals, bank: LinkBank, R_Z: np.ndarray) -> np.ndarray:
    """Entrywise ``L_ij(R_Z,ij)``."""
    R_Z = np.asarray(R_Z, dtype=float)
    out = np.empty_like(R_Z)
    for rows, cols in _pair_groups(marginals).values():
        link = bank.pair(marginals[rows[0]], marginals[cols[0]]).link
        out[rows, cols] = link_eval(link, np.clip(R_Z[rows, cols], -1.0, 1.0))
    return out


def inverse_link_matrix(R_X: np.ndarray, marginals, bank: LinkBank, lag0: bool = True) -> np.ndarray:
    """Entrywise ``L_ij^{-1}(R_X,ij)``, clamped to ``[-1, 1]``; unit diagonal at lag 0."""
    R_X = np.asarray(R_X, dtype=float)
    d = len(marginals)
    if R_X.shape != (d, d):
        raise DomainError(f"expected a {d}x{d} matrix, got {R_X.shape}")
    out = np.empty_like(R_X)
    # group entries by marginal pair so each spline is evaluated once on a vector
    for rows, cols in _pair_groups(marginals).values():
        table = bank.pair(marginals[rows[0]], marginals[cols[0]]).inverse
        out[rows, cols] = inverse_eval(table, R_X[rows, cols])
    out = np.clip(out, -1.0, 1.0)
    if lag0:
        np.fill_diagonal(out, 1.0)
    return out
