"""Parametric count marginals: CDF tables, quantiles, fitting, Hermite coefficients and latent bins.

A count ``X = G(Z) = F^{-1}(Phi(Z))`` with ``Z ~ N(0, 1)`` takes the value ``n``
exactly when ``Z`` falls in the bin ``(Phi^{-1}(C_{n-1}), Phi^{-1}(C_n)]`` with
``C_n = F(n)``.  Everything below is built on the table of these thresholds.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import stats
from scipy.special import gammaln, log_ndtr, ndtr, ndtri

from .errors import DegenerateMarginalError, DomainError, ParameterError

TAIL_TOL = 1e-12
PROB_CLAMP = 1e-6
DEFAULT_K = 100


class Family(str, enum.Enum):
    BERNOULLI = "bernoulli"
    POISSON = "poisson"
    NEGBIN = "negbin"
    MULTINOMIAL = "multinomial"

    @classmethod
    def parse(cls, value: "str | Family") -> "Family":
        if isinstance(value, Family):
            return value
        key = str(value).strip().lower()
        aliases = {
            "bern": "bernoulli",
            "pois": "poisson",
            "nb": "negbin",
            "negbinomial": "negbin",
            "negative_binomial": "negbin",
            "multi": "multinomial",
            "categorical": "multinomial",
        }
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ParameterError(f"unknown marginal family {value!r}") from None


@dataclass(frozen=True)
class MarginalSpec:
    """A count distribution.

    ``params`` layout per family:

    * bernoulli: ``(p,)``, P(X=1) = p
    * poisson: ``(lam,)``
    * negbin: ``(r_nb, p)``, failures before the ``r_nb``-th success, mean ``r_nb (1-p)/p``
    * multinomial: ``(p_1, ..., p_m)`` over the support ``{1, ..., m}``
    """

    family: Family
    params: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        object.__setattr__(self, "params", tuple(float(v) for v in self.params))
        self._validate()

    # constructors -----------------------------------------------------
    @classmethod
    def bernoulli(cls, p: float) -> "MarginalSpec":
        return cls(Family.BERNOULLI, (p,))

    @classmethod
    def poisson(cls, lam: float) -> "MarginalSpec":
        return cls(Family.POISSON, (lam,))

    @classmethod
    def negbin(cls, r_nb: int, p: float) -> "MarginalSpec":
        return cls(Family.NEGBIN, (r_nb, p))

    @classmethod
    def multinomial(cls, probs) -> "MarginalSpec":
        return cls(Family.MULTINOMIAL, tuple(probs))

    def _validate(self) -> None:
        fam, th = self.family, self.params
        if not all(math.isfinite(v) for v in th):
            raise ParameterError(f"non-finite parameters {th}")
        if fam is Family.BERNOULLI:
            if len(th) != 1 or not 0.0 < th[0] < 1.0:
                raise ParameterError(f"Bernoulli needs p in (0,1), got {th}")
        elif fam is Family.POISSON:
            if len(th) != 1 or th[0] <= 0.0:
                raise ParameterError(f"Poisson needs lambda > 0, got {th}")
        elif fam is Family.NEGBIN:
            if len(th) != 2 or th[0] < 1 or th[0] != int(th[0]) or not 0.0 < th[1] < 1.0:
                raise ParameterError(f"negative binomial needs (integer r_nb >= 1, p in (0,1)), got {th}")
        elif fam is Family.MULTINOMIAL:
            pr = np.asarray(th)
            if pr.size < 2 or np.any(pr <= 0.0) or np.any(pr >= 1.0):
                raise ParameterError(f"multinomial needs >= 2 probabilities in (0,1), got {th}")
            if abs(pr.sum() - 1.0) > 1e-12:
                raise ParameterError(f"multinomial probabilities sum to {pr.sum()!r}, not 1")

    # basic properties -------------------------------------------------
    @property
    def support_offset(self) -> int:
        return 1 if self.family is Family.MULTINOMIAL else 0

    @property
    def bounded(self) -> bool:
        return self.family in (Family.BERNOULLI, Family.MULTINOMIAL)

    @cached_property
    def _dist(self):
        fam, th = self.family, self.params
        if fam is Family.BERNOULLI:
            return stats.bernoulli(th[0])
        if fam is Family.POISSON:
            return stats.poisson(th[0])
        if fam is Family.NEGBIN:
            return stats.nbinom(th[0], th[1])
        return None

    @cached_property
    def n_max(self) -> int:
        """Largest support value kept in the tables.

        Bounded families: the top of the support.  Otherwise the smallest ``n``
        with ``1 - C_n < TAIL_TOL``.
        """
        if self.family is Family.BERNOULLI:
            return 1
        if self.family is Family.MULTINOMIAL:
            return len(self.params)
        dist = self._dist
        n = int(max(dist.mean() + 10 * dist.std(), 10))
        while dist.sf(n) >= TAIL_TOL:
            n *= 2
        # bisection for the first n below the tolerance
        lo, hi = -1, n
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if dist.sf(mid) < TAIL_TOL:
                hi = mid
            else:
                lo = mid
        return hi

    @cached_property
    def support(self) -> np.ndarray:
        return np.arange(self.support_offset, self.n_max + 1)

    @cached_property
    def _tables(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = self.support
        if self.family is Family.MULTINOMIAL:
            pmf = np.asarray(self.params)
            cdf = np.cumsum(pmf)
            cdf[-1] = 1.0
            sf = np.concatenate([np.cumsum(pmf[::-1])[::-1][1:], [0.0]])
        else:
            pmf = self._dist.pmf(n)
            cdf = self._dist.cdf(n)
            sf = self._dist.sf(n)
            if self.bounded:
                cdf[-1], sf[-1] = 1.0, 0.0
        return pmf, cdf, sf

    @property
    def pmf_table(self) -> np.ndarray:
        return self._tables[0]

    @property
    def cdf_table(self) -> np.ndarray:
        """``C_n`` for ``n`` in ``support``."""
        return self._tables[1]

    @cached_property
    def thresholds(self) -> np.ndarray:
        """Upper bin edges ``Phi^{-1}(C_n)`` for ``n`` in ``support``.

        Edges in the upper half are computed from the survival function to keep
        precision near 1.  The top edge of a bounded family is ``+inf``.
        """
        _, cdf, sf = self._tables
        with np.errstate(divide="ignore"):
            edges = np.where(cdf < 0.5, ndtri(cdf), -ndtri(sf))
        return edges

    def pmf(self, n) -> np.ndarray:
        n = np.asarray(n)
        if self.family is Family.MULTINOMIAL:
            idx = n - 1
            ok = (idx >= 0) & (idx < len(self.params))
            return np.where(ok, np.asarray(self.params)[np.clip(idx, 0, len(self.params) - 1)], 0.0)
        return self._dist.pmf(n)

    def cdf(self, n) -> np.ndarray:
        n = np.asarray(n)
        if self.family is Family.MULTINOMIAL:
            c = np.concatenate([[0.0], self.cdf_table])
            return c[np.clip(n, 0, len(self.params))]
        return self._dist.cdf(n)

    def sf(self, n) -> np.ndarray:
        n = np.asarray(n)
        if self.family is Family.MULTINOMIAL:
            s = np.concatenate([[1.0], self._tables[2]])
            return s[np.clip(n, 0, len(self.params))]
        return self._dist.sf(n)

    @cached_property
    def mean(self) -> float:
        if self.family is Family.MULTINOMIAL:
            return float(np.dot(self.support, self.params))
        return float(self._dist.mean())

    @cached_property
    def var(self) -> float:
        if self.family is Family.MULTINOMIAL:
            k = self.support
            return float(np.dot(k * k, self.params) - self.mean**2)
        return float(self._dist.var())

    @cached_property
    def mode(self) -> int:
        """Most likely value; ties go to the smaller count."""
        return int(self.support[np.argmax(self.pmf_table)])

    def key(self) -> tuple:
        return (self.family.value, self.params)

    def to_dict(self) -> dict:
        return {"family": self.family.value, "params": list(self.params)}

    @classmethod
    def from_dict(cls, data: dict) -> "MarginalSpec":
        return cls(Family.parse(data["family"]), tuple(data["params"]))


def quantile(spec: MarginalSpec, u):
    """Generalized inverse ``inf{v : F(v) >= u}``, vectorized over ``u``."""
    u = np.asarray(u, dtype=float)
    if np.any(~((u > 0.0) & (u < 1.0))):
        raise DomainError("quantile needs u in (0, 1)")
    cdf = spec.cdf_table
    idx = np.searchsorted(cdf, u, side="left")
    out = spec.support_offset + idx
    beyond = idx >= cdf.size
    if np.any(beyond):
        out = np.where(beyond, spec._dist.ppf(u), out)
    out = out.astype(np.int64)
    return out if out.ndim else int(out)


def from_latent(spec: MarginalSpec, z):
    """Count value ``G(z)`` whose bin contains ``z``.  Works directly on the
    latent scale, so very large ``z`` never round ``Phi(z)`` to 1."""
    z = np.asarray(z, dtype=float)
    edges = spec.thresholds
    idx = np.searchsorted(edges, z, side="left")
    out = spec.support_offset + idx
    beyond = idx >= edges.size
    if np.any(beyond):
        tail = np.zeros(z.shape)
        tail[beyond] = [_tail_value(spec, v) for v in z[beyond]]
        out = np.where(beyond, tail, out)
    out = out.astype(np.int64)
    return out if out.ndim else int(out)


def _tail_value(spec: MarginalSpec, z: float) -> int:
    """Smallest ``n > n_max`` with ``log sf(n) <= log Phi(-z)``.  Bisection on
    the log scale, since ``isf`` returns nan for probabilities below ~1e-19."""
    target = log_ndtr(-z)
    if not np.isfinite(target):
        raise DomainError(f"latent value {z} has no finite count")
    lo = spec.n_max
    hi = max(2 * lo, lo + 1)
    while spec._dist.logsf(hi) > target:
        lo, hi = hi, 2 * hi
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if spec._dist.logsf(mid) > target:
            lo = mid
        else:
            hi = mid
    return hi


def bin_bounds(spec: MarginalSpec, n) -> tuple:
    """Latent interval ``(lo, hi]`` mapped to count ``n``; vectorized over ``n``."""
    n_arr = np.asarray(n)
    if np.any(n_arr != np.floor(n_arr)):
        raise DomainError(f"count values must be integers, got {n!r}")
    n_arr = n_arr.astype(np.int64)
    if np.any(n_arr < spec.support_offset) or (spec.bounded and np.any(n_arr > spec.n_max)):
        raise DomainError(f"value(s) {n!r} outside the support of {spec.family.value}")
    lo = _upper_edge(spec, n_arr - 1)
    hi = _upper_edge(spec, n_arr)
    if lo.ndim == 0:
        return float(lo), float(hi)
    return lo, hi


def _upper_edge(spec: MarginalSpec, n: np.ndarray) -> np.ndarray:
    edges = spec.thresholds
    i = n - spec.support_offset
    inside = (i >= 0) & (i < edges.size)
    out = np.where(inside, edges[np.clip(i, 0, edges.size - 1)], 0.0)
    out = np.where(i < 0, -np.inf, out)
    outside = i >= edges.size
    if np.any(outside):
        s = spec.sf(np.where(outside, n, 0))
        with np.errstate(divide="ignore"):
            out = np.where(outside, -ndtri(s), out)
    return out


def bin_table(spec: MarginalSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Support values and their bin edges, with the last bin of an unbounded
    family extended to ``+inf`` so the bins cover the real line."""
    values = spec.support
    lo, hi = bin_bounds(spec, values)
    hi = np.array(hi, dtype=float)
    hi[-1] = np.inf
    return values, np.asarray(lo, dtype=float), hi


# ----------------------------------------------------------------------------
# fitting


def fit_marginal(series, family, r_nb: int | None = None, m: int | None = None) -> MarginalSpec:
    """Fit a marginal from one observed series.

    Bernoulli: sample proportion of ones.  Poisson: sample mean.  Negative
    binomial with ``r_nb`` given: ``p = r_nb / (r_nb + mean)``, which is the MLE
    for fixed ``r_nb``.  Multinomial on ``{1..m}``: cell proportions.
    """
    fam = Family.parse(family)
    x = np.asarray(series)
    if x.ndim != 1 or x.size < 2:
        raise ParameterError("need a 1-d series of length >= 2")
    if np.any(x != np.round(x)):
        raise DomainError("series must be integer valued")
    x = x.astype(np.int64)
    T = x.size

    if fam is Family.BERNOULLI:
        if np.any((x != 0) & (x != 1)):
            raise DomainError("Bernoulli series must be 0/1")
        p = x.mean()
        if p in (0.0, 1.0):
            raise DegenerateMarginalError(f"Bernoulli series is constant at {int(p)}")
        return MarginalSpec.bernoulli(float(np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)))

    if np.any(x < 0):
        raise DomainError("count series must be nonnegative")

    if fam is Family.POISSON:
        lam = x.mean()
        if lam == 0.0:
            raise DegenerateMarginalError("Poisson series is identically 0")
        return MarginalSpec.poisson(float(lam))

    if fam is Family.NEGBIN:
        if r_nb is None:
            raise ParameterError("negative binomial fit needs the number of successes r_nb")
        mean = x.mean()
        if mean == 0.0:
            raise DegenerateMarginalError("negative binomial series is identically 0")
        return MarginalSpec.negbin(int(r_nb), float(r_nb / (r_nb + mean)))

    # multinomial on {1..m}
    if m is None:
        m = int(x.max())
    m = int(m)
    if m < 2:
        raise ParameterError("multinomial support needs m >= 2")
    if np.any(x < 1) or np.any(x > m):
        raise DomainError(f"multinomial series must lie in 1..{m}")
    if np.all(x == x[0]) and x[0] in (1, m):
        raise DegenerateMarginalError(f"multinomial series is constant at the boundary value {x[0]}")
    probs = np.bincount(x, minlength=m + 1)[1:] / T
    return MarginalSpec.multinomial(_clamp_probs(probs))


def _clamp_probs(probs: np.ndarray) -> tuple[float, ...]:
    if np.all((probs >= PROB_CLAMP) & (probs <= 1 - PROB_CLAMP)):
        return tuple(float(v) for v in probs)
    q = np.clip(probs, PROB_CLAMP, 1 - PROB_CLAMP)
    q = q / q.sum()
    # renormalization may nudge a clamped cell; fold the rounding into the largest cell
    q[np.argmax(q)] += 1.0 - q.sum()
    return tuple(float(v) for v in q)


# ----------------------------------------------------------------------------
# Hermite expansion of G


@dataclass(frozen=True)
class HermiteCoeffs:
    """Coefficients ``g_k`` of ``G(z) = sum_k g_k H_k(z)`` (probabilists' Hermite).

    ``scaled[k] = sqrt(k!) g_k`` is kept alongside because products
    ``k! g_{i,k} g_{j,k}`` are formed from it without over/underflow.
    """

    g: np.ndarray
    scaled: np.ndarray
    variance: float
    truncation_K: int
    spec: MarginalSpec | None = field(default=None, compare=False)

    @property
    def variance_explained(self) -> float:
        return float(np.sum(self.scaled[1:] ** 2))


def hermite_coefficients(spec: MarginalSpec, K: int = DEFAULT_K) -> HermiteCoeffs:
    """Hermite coefficients up to order ``K``.

    Uses ``g_k = (k! sqrt(2 pi))^{-1} sum_n exp(-a_n^2/2) H_{k-1}(a_n)`` over the
    finite thresholds ``a_n``; infinite thresholds contribute zero.  The
    polynomials are evaluated in normalized form ``h_k = H_k / sqrt(k!)`` through
    the three-term recurrence.
    """
    if K < 1:
        raise ParameterError("K must be >= 1")
    a = spec.thresholds
    a = a[np.isfinite(a)]
    w = np.exp(-0.5 * a * a)
    # S[k] = sum_n w_n h_{k-1}(a_n), k = 1..K
    S = np.empty(K + 1)
    S[0] = np.nan
    h_prev = np.zeros_like(a)
    h = np.ones_like(a)
    S[1] = np.sum(w * h)
    for j in range(1, K):
        # h_j from h_{j-1} and h_{j-2}
        h_next = (a * h - math.sqrt(j - 1) * h_prev) / math.sqrt(j) if j > 1 else a * h
        h_prev, h = h, h_next
        S[j + 1] = np.sum(w * h)
    k = np.arange(K + 1)
    scaled = np.empty(K + 1)
    scaled[0] = spec.mean
    # sqrt(k!) g_k = S_k sqrt((k-1)!) / (sqrt(k!) sqrt(2 pi)) = S_k / sqrt(2 pi k)
    scaled[1:] = S[1:] / np.sqrt(2.0 * np.pi * k[1:])
    g = np.empty(K + 1)
    g[0] = spec.mean
    g[1:] = scaled[1:] * np.exp(-0.5 * gammaln(k[1:] + 1.0))
    return HermiteCoeffs(g=g, scaled=scaled, variance=spec.var, truncation_K=K, spec=spec)
