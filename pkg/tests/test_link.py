from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate
from scipy.special import ndtr, ndtri
from scipy.stats import norm

from countdfm.errors import DomainError, ParameterError
from countdfm.link import (
    LinkBank,
    attainable_bounds,
    build_inverse,
    chebyshev_grid,
    inverse_eval,
    inverse_link_matrix,
    link_between,
    link_eval,
    link_matrix,
    natural_spline_second_derivatives,
)
from countdfm.marginals import MarginalSpec
from countdfm.model import FAMILY_PRESETS

BANK = LinkBank()
ALL_PAIRS = [
    (MarginalSpec(fam, a), MarginalSpec(fam, b))
    for fam, ps in FAMILY_PRESETS.items()
    for a, b in itertools.combinations_with_replacement(ps, 2)
]
PAIR_IDS = [f"{a.family.value}{a.params}-{b.params}" for a, b in ALL_PAIRS]


def orthant(a: float, b: float, rho: float) -> float:
    """P(Z1 > a, Z2 > b) for a standard bivariate normal, by 1-d quadrature."""
    if abs(rho) == 1.0:
        return float(ndtr(-max(a, b))) if rho > 0 else max(0.0, float(ndtr(-a) - ndtr(b)))
    s = np.sqrt(1 - rho * rho)
    val, _ = integrate.quad(lambda z: norm.pdf(z) * ndtr((rho * z - b) / s), a, np.inf, epsabs=1e-14, epsrel=1e-12)
    return val


def bernoulli_link_oracle(p1: float, p2: float, u: float) -> float:
    a, b = ndtri(1 - p1), ndtri(1 - p2)
    return (orthant(a, b, u) - p1 * p2) / np.sqrt(p1 * (1 - p1) * p2 * (1 - p2))


@pytest.mark.parametrize("p1,p2", [(0.2, 0.4), (0.2, 0.7), (0.5, 0.5), (0.3, 0.9)])
def test_bernoulli_link_matches_orthant(p1, p2):
    link = BANK.pair(MarginalSpec.bernoulli(p1), MarginalSpec.bernoulli(p2)).link
    for u in np.round(np.arange(-0.9, 0.91, 0.1), 10):
        assert link_eval(link, u) == pytest.approx(bernoulli_link_oracle(p1, p2, u), abs=1e-4)


def test_bernoulli_link_tail_matches_orthant():
    link = BANK.pair(MarginalSpec.bernoulli(0.2), MarginalSpec.bernoulli(0.7)).link
    for u in (-0.99, -0.95, 0.95, 0.99):
        assert link_eval(link, u) == pytest.approx(bernoulli_link_oracle(0.2, 0.7, u), abs=1e-8)


def test_link_examples():
    link = BANK.pair(MarginalSpec.bernoulli(0.2), MarginalSpec.bernoulli(0.5)).link
    assert link.rho_plus == pytest.approx(0.5, abs=1e-6)
    link = BANK.pair(MarginalSpec.bernoulli(0.5), MarginalSpec.bernoulli(0.5)).link
    assert link.rho_minus == pytest.approx(-1.0, abs=1e-6)
    assert link.rho_plus == pytest.approx(1.0, abs=1e-6)
    assert link_eval(link, 0.0) == 0.0


@pytest.mark.parametrize("si,sj", ALL_PAIRS, ids=PAIR_IDS)
def test_link_ends_match_attainable_bounds(si, sj):
    link = BANK.pair(si, sj).link
    lo, hi = attainable_bounds(si, sj)
    assert link.rho_minus == pytest.approx(lo, abs=1e-6)
    assert link.rho_plus == pytest.approx(hi, abs=1e-6)


@pytest.mark.parametrize("si,sj", ALL_PAIRS, ids=PAIR_IDS)
def test_link_monotone_and_fixes_zero(si, sj):
    link = BANK.pair(si, sj).link
    u = np.linspace(-1, 1, 201)
    v = link_eval(link, u)
    assert np.all(np.diff(v) >= -1e-10)
    assert link_eval(link, 0.0) == 0.0
    assert np.all(np.abs(v) <= np.abs(u) + 1e-9)


@pytest.mark.parametrize("si,sj", ALL_PAIRS, ids=PAIR_IDS)
def test_inverse_round_trip_interior(si, sj):
    lp = BANK.pair(si, sj)
    u = np.linspace(-0.8, 0.8, 161)
    assert np.max(np.abs(inverse_eval(lp.inverse, link_eval(lp.link, u)) - u)) < 1e-3


@given(st.sampled_from(ALL_PAIRS), st.floats(-1.5, 1.5))
def test_inverse_clamped_and_monotone(pair, v):
    table = BANK.pair(*pair).inverse
    out = inverse_eval(table, v)
    assert -1.0 <= out <= 1.0
    assert inverse_eval(table, v + 1e-3) >= out - 1e-9


def test_inverse_clamps_outside_range():
    lp = BANK.pair(MarginalSpec.bernoulli(0.2), MarginalSpec.bernoulli(0.5))
    assert inverse_eval(lp.inverse, 0.9) == 1.0
    assert inverse_eval(lp.inverse, -0.9) == -1.0


def test_link_symmetric_in_pair():
    si, sj = MarginalSpec.poisson(1.0), MarginalSpec.negbin(3, 0.4)
    u = np.linspace(-0.95, 0.95, 39)
    assert np.allclose(link_eval(link_between(si, sj), u), link_eval(link_between(sj, si), u), atol=1e-12)


def test_link_rejects_outside_unit_interval():
    link = BANK.pair(MarginalSpec.poisson(1.0), MarginalSpec.poisson(1.0)).link
    with pytest.raises(DomainError):
        link_eval(link, 1.1)


def test_inverse_needs_enough_knots():
    link = BANK.pair(MarginalSpec.poisson(1.0), MarginalSpec.poisson(1.0)).link
    with pytest.raises(ParameterError):
        build_inverse(link, M=5)


def test_chebyshev_grid_endpoints():
    g = chebyshev_grid(200)
    assert g[0] == -1.0 and g[-1] == 1.0 and g.size == 201
    assert np.all(np.diff(g) > 0)


def test_natural_spline_reproduces_line_and_matches_scipy():
    from scipy.interpolate import CubicSpline

    x = np.sort(np.random.default_rng(0).uniform(0, 3, 12))
    assert np.allclose(natural_spline_second_derivatives(x, 2 * x + 1), 0.0, atol=1e-12)
    y = np.sin(x)
    cs = CubicSpline(x, y, bc_type="natural")
    assert np.allclose(natural_spline_second_derivatives(x, y), cs(x, 2), atol=1e-10)


def test_link_matrix_and_inverse_matrix():
    marg = [MarginalSpec.poisson(1.0), MarginalSpec.poisson(1.0), MarginalSpec.negbin(3, 0.4)]
    R = np.array([[1.0, 0.5, -0.3], [0.5, 1.0, 0.2], [-0.3, 0.2, 1.0]])
    RX = link_matrix(marg, BANK, R)
    assert np.allclose(np.diag(RX), 1.0, atol=1e-6)
    assert np.allclose(RX, RX.T)
    back = inverse_link_matrix(RX, marg, BANK)
    assert np.allclose(back, R, atol=1e-6)
    with pytest.raises(DomainError):
        inverse_link_matrix(RX[:2, :2], marg, BANK)


def test_bank_caches_pairs_once():
    bank = LinkBank()
    a, b = MarginalSpec.poisson(1.0), MarginalSpec.poisson(10.0)
    assert bank.pair(a, b) is bank.pair(b, a)
    assert len(bank) == 1
