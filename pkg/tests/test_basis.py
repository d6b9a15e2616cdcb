from fractions import Fraction
from math import comb

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from glmom import basis
from glmom.errors import DomainError


def coefficient_form(r, u):
    """P*_r(u) from its explicit integer coefficients, in exact arithmetic."""
    u = Fraction(u)
    return float(sum((-1) ** (r - k) * comb(r, k) * comb(r + k, k) * u**k for k in range(r + 1)))


@pytest.mark.parametrize(
    "r, u, expected", [(0, 0.7, 1.0), (1, 0.5, 0.0), (2, 0.25, -0.125)]
)
def test_eval_examples(r, u, expected):
    assert basis.eval_shifted_legendre(r, u) == pytest.approx(expected, abs=1e-15)


def test_recurrence_matches_coefficient_form():
    grid = np.linspace(0, 1, 101)
    for r in range(16):
        rec = basis.eval_shifted_legendre(r, grid)
        exact = np.array([coefficient_form(r, Fraction(i, 100)) for i in range(101)])
        assert np.max(np.abs(rec - exact)) < 1e-9


def test_high_order_stays_bounded():
    u = np.linspace(0, 1, 1001)
    vals = basis.eval_shifted_legendre(500, u)
    assert np.all(np.abs(vals) <= 1 + 1e-9)
    assert basis.eval_shifted_legendre(500, 1.0) == pytest.approx(1.0)


@pytest.mark.parametrize("r, u", [(-1, 0.5), (0, 1.5), (0, -0.1), (basis.MAX_ORDER + 1, 0.5)])
def test_eval_domain_errors(r, u):
    with pytest.raises(DomainError):
        basis.eval_shifted_legendre(r, u)


@pytest.mark.parametrize(
    "r, a, b, expected", [(0, 0, 1, 1.0), (1, 0, 1, 0.0), (1, 0, 1 / 3, -2 / 9)]
)
def test_interval_examples(r, a, b, expected):
    assert basis.interval_integral(r, a, b) == pytest.approx(expected, abs=1e-15)


def test_interval_order_error():
    with pytest.raises(DomainError):
        basis.interval_integral(2, 0.6, 0.4)


def test_interval_matches_adaptive_quadrature():
    rng = np.random.default_rng(0)
    for r in range(31):
        a, b = np.sort(rng.uniform(size=2))
        ref, _ = integrate.quad(lambda u: basis.eval_shifted_legendre(r, u), a, b, epsabs=1e-14, limit=200)
        assert abs(basis.interval_integral(r, a, b) - ref) < 1e-12


@given(
    st.integers(0, 40),
    st.lists(st.floats(0, 1, allow_nan=False), min_size=3, max_size=3),
)
def test_interval_additivity(r, pts):
    a, b, c = sorted(pts)
    whole = basis.interval_integral(r, a, c)
    parts = basis.interval_integral(r, a, b) + basis.interval_integral(r, b, c)
    assert abs(whole - parts) < 1e-12


def test_gram_identity_L30():
    g = basis.gram_matrix(basis.BasisSpec(30))
    assert np.max(np.abs(g - np.eye(30))) < 1e-10


def test_gram_examples():
    assert np.allclose(basis.gram_matrix(basis.BasisSpec(3)), np.eye(3), atol=1e-14)
    assert basis.gram_matrix(basis.BasisSpec(1, rescaled=False))[0, 0] == pytest.approx(1.0)
    g = basis.gram_matrix(basis.BasisSpec(2, trim=(0.0, 0.5)))
    assert g[0, 0] == pytest.approx(0.5)


def test_gram_unrescaled_diagonal():
    g = basis.gram_matrix(basis.BasisSpec(6, rescaled=False))
    assert np.allclose(np.diag(g), 1.0 / (2 * np.arange(6) + 1), atol=1e-14)


@pytest.mark.parametrize("kwargs", [{"max_order": 0}, {"max_order": 3, "trim": (0.5, 0.5)}, {"max_order": 2.5}])
def test_basis_spec_validation(kwargs):
    with pytest.raises(DomainError):
        basis.BasisSpec(**kwargs)


def test_step_integrals_sum_to_full_integral():
    edges = np.linspace(0, 1, 11)
    cells = basis.step_integrals(5, edges, rescaled=False)
    assert np.allclose(cells.sum(axis=1), [1, 0, 0, 0, 0], atol=1e-14)
    batch = basis.step_integrals(5, np.vstack([edges, edges]), rescaled=True)
    assert batch.shape == (5, 2, 10)
    assert np.allclose(batch[:, 0], batch[:, 1])
