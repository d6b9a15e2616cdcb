from fractions import Fraction
from itertools import combinations
from math import comb

import numpy as np
import pytest
from hypothesis import given, strategies as st

from glmom import lmom
from glmom.errors import DomainError, NumericalError


# ---------------------------------------------------------------- oracles


def subsample_lmoments(z, L):
    """Unbiased L-moments by enumerating every size-r subsample."""
    z = sorted(z)
    out = []
    for r in range(1, L + 1):
        acc, n = 0.0, 0
        for sub in combinations(z, r):
            acc += sum((-1) ** k * comb(r - 1, k) * sub[r - 1 - k] for k in range(r)) / r
            n += 1
        out.append(acc / n)
    return np.array(out)


def exact_step_lmoments(z, L):
    """Step-function L-moments in rational arithmetic from polynomial coefficients."""
    z = sorted(Fraction(x) for x in z)
    T = len(z)
    out = []
    for r in range(L):
        coef = [(-1) ** (r - k) * comb(r, k) * comb(r + k, k) for k in range(r + 1)]

        def F(u):
            return sum(Fraction(c, k + 1) * u ** (k + 1) for k, c in enumerate(coef))

        out.append(float(sum(zi * (F(Fraction(i + 1, T)) - F(Fraction(i, T))) for i, zi in enumerate(z))))
    return np.array(out)


def exact_c_matrix(L):
    C = np.zeros((L, L))
    for i in range(1, L + 1):
        for j in range(1, i + 1):
            v = Fraction((-1) ** (i - j) * comb(i - 1, j - 1) * comb(i + j - 2, j - 1), j)
            C[i - 1, j - 1] = float(v) * np.sqrt(2 * i - 1)
    return C


# ---------------------------------------------------------------- examples


def test_hand_values():
    s = lmom.Sample([3, 1, 2])
    assert lmom.caglad_lmoments(s, 1).values[0] == pytest.approx(2.0)
    assert lmom.caglad_lmoments(s, 2).values[1] == pytest.approx(4 / 9, abs=1e-15)
    u = lmom.unbiased_lmoments(s, 3).values
    assert u == pytest.approx([2.0, 2 / 3, 0.0], abs=1e-14)
    assert lmom.unbiased_lmoments([5.0], 1).values[0] == 5.0


def test_pwm_examples():
    s = lmom.Sample([1, 2, 3])
    assert lmom.pwm_vector(s, 1)[0] == pytest.approx(2.0)
    assert lmom.pwm_vector(s, 2, "unbiased")[1] == pytest.approx(8 / 3, abs=1e-14)
    c = lmom.pwm_vector(np.full(7, 4.5), 6)
    assert np.allclose(c, 4.5, atol=1e-13)


def test_degenerate_sample():
    v = lmom.caglad_lmoments(np.full(9, 2.5), 6).values
    assert v[0] == pytest.approx(2.5)
    assert np.allclose(v[1:], 0, atol=1e-14)


def test_unbiased_matches_enumeration():
    rng = np.random.default_rng(3)
    for T in (5, 8, 11):
        z = rng.standard_normal(T)
        L = min(T, 6)
        assert np.allclose(lmom.unbiased_lmoments(z, L).values, subsample_lmoments(z, L), atol=1e-12)


def test_caglad_matches_exact_rational():
    rng = np.random.default_rng(4)
    z = np.round(rng.standard_normal(13), 3)
    assert np.allclose(lmom.caglad_lmoments(z, 8).values, exact_step_lmoments(z, 8), atol=1e-12)


def test_c_matrix_closed_forms():
    for L in (1, 4, 12):
        C = lmom.c_matrix(L)
        assert np.allclose(C, exact_c_matrix(L), rtol=1e-14, atol=0)
        assert np.allclose(np.triu(C, 1), 0)
        assert np.allclose(C[0], np.eye(L)[0])
    for L in (5, 20):
        assert np.allclose(lmom.c_inverse(L) @ lmom.c_matrix(L), np.eye(L), atol=1e-6)
    assert np.all(np.abs(lmom.c_inverse(200)) <= 200)


def test_c_path_equals_integral_path_on_random_samples():
    rng = np.random.default_rng(5)
    C = lmom.c_matrix(6)
    worst = 0.0
    for _ in range(100):
        z = rng.exponential(size=rng.integers(2, 60))
        direct = lmom.caglad_lmoments(z, 6, rescaled=True).values
        worst = max(worst, np.max(np.abs(C @ lmom.pwm_vector(z, 6) - direct)))
    assert worst < 1e-9


def test_unbiased_pwm_path():
    rng = np.random.default_rng(6)
    z = rng.standard_normal(40)
    C = lmom.c_matrix(8)
    via_pwm = C @ lmom.pwm_vector(z, 8, "unbiased")
    assert np.allclose(via_pwm, lmom.unbiased_lmoments(z, 8, rescaled=True).values, atol=1e-9)


def test_unbiased_large_T_is_stable():
    z = np.random.default_rng(7).uniform(size=200_000)
    v = lmom.unbiased_lmoments(z, 20).values
    assert np.all(np.isfinite(v))
    assert v[1] == pytest.approx(1 / 6, abs=2e-3)
    assert np.max(np.abs(v[2:])) < 5e-3


def test_unbiased_domain_and_warnings():
    with pytest.raises(DomainError):
        lmom.unbiased_lmoments([1.0, 2.0], 3)
    assert lmom.unbiased_lmoments(np.arange(10.0), 6).warnings
    assert not lmom.unbiased_lmoments(np.arange(10.0), 5).warnings
    assert lmom.caglad_lmoments([1.0, 2.0], 21).warnings
    assert not lmom.caglad_lmoments([1.0, 2.0], 20).warnings


def test_sample_validation():
    with pytest.raises(DomainError):
        lmom.Sample([])
    with pytest.raises(DomainError):
        lmom.Sample([1.0, np.nan])
    s = lmom.Sample([3.0, 1.0])
    assert list(s.values) == [1.0, 3.0]
    with pytest.raises(ValueError):
        s.values[0] = 5.0


def test_trimmed_caglad_ignores_outside_cells():
    z = np.array([1.0, 2.0, 3.0, 100.0])
    v = lmom.caglad_lmoments(z, 1, trim=(0.0, 0.75)).values[0]
    assert v == pytest.approx((1 + 2 + 3) / 4)


# ---------------------------------------------------------------- theoretical


def test_theoretical_examples():
    v = lmom.theoretical_lmoments(lambda u: u, 3).values
    assert v == pytest.approx([0.5, 1 / 6, 0.0], abs=1e-12)
    c = lmom.theoretical_lmoments(lambda u: np.full_like(u, 3.0), 2).values
    assert c == pytest.approx([3.0, 0.0], abs=1e-12)


def test_theoretical_singular_quantile():
    # exponential: lambda1 = 1, lambda2 = 1/2, tau3 = 1/3
    v = lmom.theoretical_lmoments(lambda u: -np.log1p(-u), 3)
    assert v.info["converged"]
    assert v.values == pytest.approx([1.0, 0.5, 1 / 6], rel=1e-8)


def test_theoretical_non_finite_raises():
    with pytest.raises(NumericalError) as exc:
        lmom.theoretical_lmoments(lambda u: np.where(u > 0.5, np.inf, u), 2)
    assert exc.value.diagnostics["n_bad"] > 0


# ---------------------------------------------------------------- properties


def test_estimators_converge_at_root_t_rate():
    def gap(T, seeds):
        out = []
        for sd in seeds:
            z = np.random.default_rng(sd).uniform(size=T)
            out.append(np.max(np.abs(lmom.caglad_lmoments(z, 5).values - lmom.unbiased_lmoments(z, 5).values)))
        return np.mean(out)

    seeds = range(200)
    assert gap(100, seeds) > 5 * gap(1000, seeds)


def test_unbiasedness_of_l2():
    rng = np.random.default_rng(8)
    draws = rng.uniform(size=(10_000, 20))
    w = lmom._unbiased_weights(20, 2)[1]
    l2 = np.sort(draws, axis=1) @ w
    se = l2.std(ddof=1) / np.sqrt(l2.size)
    assert abs(l2.mean() - 1 / 6) < 3 * se


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@given(
    st.lists(finite, min_size=3, max_size=30),
    st.floats(0.01, 100),
    finite,
)
def test_location_scale_equivariance(values, a, b):
    z = np.array(values)
    L = 3
    for est, tol in ((lmom.unbiased_lmoments, 1e-9), (lmom.caglad_lmoments, 1e-10)):
        base = est(z, L).values
        moved = est(a * z + b, L).values
        scale = 1 + np.max(np.abs(z)) * a + abs(b)
        assert abs(moved[0] - (a * base[0] + b)) <= tol * scale
        assert np.allclose(moved[1:], a * base[1:], atol=tol * scale)


@given(st.lists(finite, min_size=1, max_size=40))
def test_l2_nonnegative(values):
    z = np.array(values)
    assert lmom.caglad_lmoments(z, 2).values[1] >= -1e-12 * (1 + np.abs(z).max())
    if z.size >= 2:
        assert lmom.unbiased_lmoments(z, 2).values[1] >= -1e-12 * (1 + np.abs(z).max())
