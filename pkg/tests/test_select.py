import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glmom import gmlm, select
from glmom.errors import DomainError, OrderConditionError
from glmom.families import get_family

GEV = get_family("gev")
GPD = get_family("gpd")
TH = np.array([0.0, 1.0, -0.2])


def random_problem(seed, L=6, d=2):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((L, L))
    return A @ A.T + 0.5 * np.eye(L), rng.standard_normal((L, d))


def test_zero_penalty_is_linear_solve():
    Xi, G = random_problem(0)
    rows = select.lasso_rows(Xi, G, 0.0, np.ones((6, 2)), 100, tol=1e-12)
    assert np.max(np.abs(rows.T - np.linalg.solve(Xi, G))) < 1e-6


def test_soft_threshold_example():
    rows = select.lasso_rows(np.eye(2), np.array([[2.0], [0.1]]), 1.0, np.ones((2, 1)), 1)
    assert np.array_equal(rows[0], [1.0, 0.0])
    assert select.soft_threshold(-3.0, 1.0) == -2.0


def test_large_penalty_zeroes_everything():
    Xi, G = random_problem(1)
    rows = select.lasso_rows(Xi, G, 1e12, np.ones((6, 2)), 10)
    assert np.all(rows == 0.0)


def test_unpenalized_coordinates_survive():
    Xi, G = random_problem(2)
    nu = np.ones((6, 2))
    nu[:2] = 0.0
    rows = select.lasso_rows(Xi, G, 1e12, nu, 10, tol=1e-12)
    # with the rest at zero the free block solves its own system
    assert np.allclose(rows[:, :2].T, np.linalg.solve(Xi[:2, :2], G[:2]), atol=1e-8)
    assert np.all(rows[:, 2:] == 0.0)


def lasso_obj(lam, Xi, b, pen):
    return 0.5 * lam @ Xi @ lam - lam @ b + pen @ np.abs(lam)


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.floats(0.0, 3.0))
def test_kkt_and_permutation(seed, k):
    Xi, G = random_problem(seed, L=5, d=1)
    nu = np.random.default_rng(seed + 1).uniform(0.2, 1.0, (5, 1))
    rows = select.lasso_rows(Xi, G, k, nu, 1, tol=1e-12)
    lam = rows[0]
    grad = Xi @ lam - G[:, 0]
    pen = k * nu[:, 0]
    on = lam != 0
    assert np.allclose(grad[on], -pen[on] * np.sign(lam[on]), atol=1e-7)
    assert np.all(np.abs(grad[~on]) <= pen[~on] + 1e-7)
    # no perturbation improves the objective
    rng = np.random.default_rng(seed)
    base = lasso_obj(lam, Xi, G[:, 0], pen)
    for _ in range(20):
        assert lasso_obj(lam + 1e-3 * rng.standard_normal(5), Xi, G[:, 0], pen) >= base - 1e-12
    perm = np.random.default_rng(seed + 2).permutation(5)
    rows_p = select.lasso_rows(Xi[np.ix_(perm, perm)], G[perm], k, nu[perm], 1, tol=1e-12)
    assert np.allclose(rows_p[0], lam[perm], atol=1e-6)


def test_lasso_rows_validation():
    with pytest.raises(DomainError):
        select.lasso_rows(np.eye(2), np.ones((2, 1)), 1.0, -np.ones((2, 1)), 1)
    with pytest.raises(DomainError):
        select.lasso_rows(np.eye(3), np.ones((2, 1)), 1.0, np.ones((2, 1)), 1)


def test_penalties():
    k, nu, notes = select.lasso_penalties(100, 20, 3, TH, "gev")
    assert nu.shape == (20, 3)
    assert np.all(nu[:3] == 0.0)
    assert np.all(nu[3:] > 0.0)
    assert notes == []
    ks = [select.lasso_penalties(T, 20, 3, TH, "gev", alpha=0.01)[0] for T in (50, 100, 1000)]
    assert ks[0] < ks[1] < ks[2]
    with pytest.warns(RuntimeWarning):
        k, _, notes = select.lasso_penalties(100, 3, 3, TH, "gev", alpha=30.0)
    assert k == 0.0 and notes
    with pytest.raises(OrderConditionError):
        select.lasso_penalties(100, 2, 3, TH, "gev")


def test_bootstrap_draw_shapes_and_mean():
    one = select.bootstrap_moment_draws("gev", TH, 50, 5, 1, np.random.default_rng(0))
    assert one.shape == (1, 5)
    draws = select.bootstrap_moment_draws("gpd", (1, -0.2), 200, 4, 400, np.random.default_rng(1))
    assert draws.shape == (400, 4)
    m, se = draws[:, 0].mean(), draws[:, 0].std(ddof=1) / np.sqrt(400)
    assert abs(m) < 3 * se
    with pytest.raises(DomainError):
        select.bootstrap_moment_draws("gev", (0, -1, 0), 50, 5, 10, np.random.default_rng(0))


def test_m0_inverse_matches_block_inverse():
    L = 5
    G = -gmlm.MomentModel("gev", L).jacobian(TH)
    S = gmlm.lmoment_covariance("gev", TH, L)
    M0 = np.block([[np.zeros((3, 3)), -G.T], [-G, -S]])
    assert np.allclose(select._m0_inverse(G, S, 1e-12), np.linalg.inv(M0), rtol=1e-6, atol=1e-8)


@pytest.fixture(scope="module")
def setup():
    return select.prepare_expansion("gev", TH, 200, 8, 60, np.random.default_rng(3))


def test_first_order_reduction(setup):
    L = 6
    t1, t2 = select.expansion_terms(setup, L, second_order=False)
    assert np.all(t2 == 0.0)
    G, S = setup.G[:L], setup.cov[:L, :L]
    omega, _ = gmlm.pseudo_inverse(S)
    infl = -np.linalg.inv(G.T @ omega @ G) @ G.T @ omega
    direct = setup.scores[:, :L] @ infl.T
    assert np.allclose(t1[:, :3], direct, atol=1e-8)
    grad = GEV.quantile_grad(np.array([0.99]), TH)[0]
    # with a linear target the RMSE is the root mean square of grad'Theta1
    r = select._rmse_from_terms(setup, t1, t2, grad, np.zeros((3, 3)))
    assert r == pytest.approx(np.sqrt(np.mean((direct @ grad) ** 2) / setup.T))


def test_second_order_term_tracks_realized_error():
    T, B, L = 1000, 30, 5
    rng = np.random.default_rng(11)
    st = select.prepare_expansion("gev", TH, T, L, B, rng)
    assert st.failed == 0
    t1, t2 = select.expansion_terms(st, L)
    # regenerate the same samples and fit the two-step estimator on each
    samples = [GEV.sample(T, TH, r) for r in select._child_rngs(np.random.default_rng(11), B)]
    real = np.array([np.sqrt(T) * (gmlm.fit_two_step(s, "gev", L).theta - TH) for s in samples])
    e1 = np.mean((real - t1[:, :3]) ** 2)
    e2 = np.mean((real - t1[:, :3] - t2[:, :3] / np.sqrt(T)) ** 2)
    assert e2 < e1


def test_tie_rule_and_boundary():
    assert select._argmin_smallest({4: 1.0, 5: 0.5, 6: 0.5}) == 5
    assert select._argmin_smallest({4: 1.0, 5: 2.0, 6: 3.0}) == 4
    assert select._argmin_smallest({4: np.inf, 5: 2.0}) == 5


def test_select_l_rmse_smoke():
    s = GEV.sample(50, TH, np.random.default_rng(8))
    sel, fit = select.select_L_rmse(s, "gev", 0.999, 100, np.random.default_rng(9), L_range=range(4, 11))
    assert 4 <= sel.chosen_L <= 10
    assert np.isfinite(sel.criterion_curve[sel.chosen_L])
    assert fit.L_used == sel.chosen_L and fit.J_pvalue is not None
    assert sel.to_dict()["method"] == "rmse"


def test_lasso_and_post_lasso():
    s = GEV.sample(100, TH, np.random.default_rng(10))
    sel = select.select_lasso(s, "gev", 30)
    assert set(range(1, 4)) <= set(sel.chosen_indices)
    assert sel.n_selected <= 30
    post = select.post_lasso_fit(s, "gev", sel)
    assert post.indices == sel.chosen_indices
    las = select.lasso_fit(s, "gev", sel)
    assert las.weights.provenance == "lasso"
    # selecting only the first d moments reproduces the just-identified fit
    base = select.SelectionResult("post-lasso", chosen_indices=(1, 2, 3))
    first = gmlm.fit_first_step(s, "gev", 3)
    assert np.allclose(select.post_lasso_fit(s, "gev", base).theta, first.theta, atol=1e-4)
    full = select.SelectionResult("post-lasso", chosen_indices=tuple(range(1, 8)))
    assert np.allclose(select.post_lasso_fit(s, "gev", full).theta, gmlm.fit_two_step(s, "gev", 7).theta)
    with pytest.raises(OrderConditionError):
        select.post_lasso_fit(s, "gev", select.SelectionResult("post-lasso", chosen_indices=(1, 2)))
