"""Choosing which L-moments to use.

Two routes:

* RMSE: for each candidate ``L`` a parametric bootstrap at the preliminary
  estimate feeds a second-order stochastic expansion of the two-step
  estimator; the expansion is mapped to a target quantile ``Q(tau | theta)``
  and the ``L`` with the smallest estimated RMSE wins.
* Lasso: an l1-penalized estimate of the matrix that combines the L moment
  conditions into d equations; post-Lasso refits the two-step estimator on
  the L-moments that received a nonzero coefficient.

Expansion conventions. With ``beta = (theta, multipliers)`` the first-order
conditions are ``m = (-G' lam ; -h - Sigma lam)`` where ``G = dh/dtheta`` and
``Sigma`` is the inverse weighting (the moment covariance). The Jacobian at
the truth is ``M0 = [[0, -G'], [-G, -Sigma]]``; its inverse is assembled from
``Omega = pinv(Sigma)`` in closed form so a singular ``Sigma`` is harmless.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy import stats

from .errors import ConvergenceError, DomainError, NumericalError, OrderConditionError
from .families import get_family
from .gmlm import (
    DEFAULT_CUTOFF,
    DEFAULT_GRID_H,
    FitResult,
    MomentModel,
    WeightMatrix,
    fit_first_step,
    fit_two_step,
    fit_weighted,
    lmoment_covariance,
    pseudo_inverse,
    sample_moments,
)
from .lmom import as_sample

__all__ = [
    "SelectionResult",
    "ExpansionSetup",
    "bootstrap_moment_draws",
    "prepare_expansion",
    "expansion_terms",
    "rmse_curve",
    "estimate_rmse_for_L",
    "select_L_rmse",
    "soft_threshold",
    "lasso_rows",
    "lasso_penalties",
    "select_lasso",
    "post_lasso_fit",
    "lasso_fit",
    "default_L_max",
]


@dataclass(frozen=True)
class SelectionResult:
    method: Literal["fixed", "rmse", "lasso", "post-lasso"]
    chosen_L: int | None = None
    chosen_indices: tuple[int, ...] | None = None
    criterion_curve: dict = field(default_factory=dict)
    bootstrap_draws: int = 0
    failed_draws: int = 0
    penalty: dict | None = None
    combination: np.ndarray | None = None

    @property
    def n_selected(self) -> int:
        if self.chosen_indices is not None:
            return len(self.chosen_indices)
        return int(self.chosen_L or 0)

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "chosen_L": self.chosen_L,
            "chosen_indices": None if self.chosen_indices is None else list(self.chosen_indices),
            "n_selected": self.n_selected,
            "criterion_curve": {str(k): float(v) for k, v in self.criterion_curve.items()},
            "bootstrap_draws": self.bootstrap_draws,
            "failed_draws": self.failed_draws,
        }
        if self.penalty is not None:
            out["penalty"] = _jsonable(self.penalty)
        return out


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    return x


def default_L_max(T: int) -> int:
    return int(min(T, 100))


# ----------------------------------------------------------------------------
# parametric bootstrap


def _child_rngs(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    seeds = rng.integers(0, 2**63 - 1, size=n)
    return [np.random.default_rng([int(s), i]) for i, s in enumerate(seeds)]


def bootstrap_moment_draws(
    family,
    theta,
    T: int,
    L: int,
    B: int,
    rng: np.random.Generator,
    kind: str = "caglad",
    trim: tuple[float, float] = (0.0, 1.0),
) -> np.ndarray:
    """``B x L`` array of ``sqrt(T) (lambda_hat - lambda(theta))`` from samples of ``F_theta``.

    The empirical mean is kept: it carries the finite-sample bias of the
    sample L-moments.
    """
    fam = get_family(family)
    theta = fam.validate(theta)
    if B < 1:
        raise DomainError(f"B must be positive, got {B}")
    lam0 = MomentModel(fam, L, trim).moments(theta)
    out = np.empty((B, L))
    for b, r in enumerate(_child_rngs(rng, B)):
        s = fam.sample(T, theta, r)
        out[b] = np.sqrt(T) * (sample_moments(s, L, kind, trim) - lam0)
    return out


@dataclass
class ExpansionSetup:
    """Everything the expansion needs for every ``L <= L_max``."""

    family: str
    theta: np.ndarray
    T: int
    L_max: int
    G: np.ndarray  # dh/dtheta at theta, (L_max, d)
    G2: np.ndarray  # d2h/dtheta2, (L_max, d, d)
    cov: np.ndarray  # moment covariance at theta, (L_max, L_max)
    scores: np.ndarray  # sqrt(T) h per draw, (B, L_max)
    cov_draws: np.ndarray  # covariance at each draw's preliminary estimate, (B, L_max, L_max)
    failed: int = 0
    cutoff: float = DEFAULT_CUTOFF

    @property
    def B(self) -> int:
        return self.scores.shape[0]


def prepare_expansion(
    family,
    theta,
    T: int,
    L_max: int,
    B: int,
    rng: np.random.Generator,
    kind: str = "caglad",
    trim: tuple[float, float] = (0.0, 1.0),
    grid_H: int = DEFAULT_GRID_H,
    cutoff: float = DEFAULT_CUTOFF,
) -> ExpansionSetup:
    """Draw ``B`` samples from ``F_theta`` and store per-draw ingredients.

    Each draw keeps its moment scores and the covariance evaluated at its own
    just-identified estimate, i.e. the weight-estimation error the two-step
    estimator would make on that sample.
    """
    fam = get_family(family)
    theta = fam.validate(theta)
    d = fam.d
    if L_max < d:
        raise OrderConditionError(f"L_max={L_max} is below d={d}")
    model = MomentModel(fam, L_max, trim)
    lam0 = model.moments(theta)
    G = -model.jacobian(theta)
    G2 = -model.hessian(theta)
    cov = lmoment_covariance(fam, theta, L_max, trim, grid_H)
    scores, covs, failed = [], [], 0
    for r in _child_rngs(rng, B):
        s = fam.sample(T, theta, r)
        lm = sample_moments(s, max(L_max, 2), kind, trim)
        try:
            pre = fit_first_step(s, fam, d, trim, kind, init=theta, n_starts=1, sample_lm=lm)
            cb = lmoment_covariance(fam, pre.theta, L_max, trim, grid_H)
        except (DomainError, NumericalError, ConvergenceError):
            failed += 1
            continue
        if not np.all(np.isfinite(cb)):
            failed += 1
            continue
        scores.append(np.sqrt(T) * (lm[:L_max] - lam0))
        covs.append(cb)
    if not scores:
        raise NumericalError("every bootstrap draw failed", {"B": B})
    return ExpansionSetup(
        fam.name, theta, int(T), int(L_max), G, G2, cov,
        np.array(scores), np.array(covs), failed, cutoff,
    )


def _m0_inverse(G: np.ndarray, cov: np.ndarray, cutoff: float) -> np.ndarray:
    d, L = G.shape[1], G.shape[0]
    omega, _ = pseudo_inverse(cov, cutoff)
    A = G.T @ omega @ G
    ev = np.linalg.eigvalsh((A + A.T) / 2)
    if ev[0] <= max(ev[-1], 0) * 1e-12 * d:
        raise NumericalError("M0 is singular: G' Omega G is not invertible", {"eigenvalues": ev.tolist()})
    As = np.linalg.inv(A)
    OG = omega @ G
    out = np.empty((d + L, d + L))
    out[:d, :d] = As
    out[:d, d:] = -As @ OG.T
    out[d:, :d] = -OG @ As
    out[d:, d:] = -omega + OG @ As @ OG.T
    return (out + out.T) / 2.0


def expansion_terms(setup: ExpansionSetup, L: int, second_order: bool = True):
    """First- and second-order terms ``(Theta1, Theta2)`` for every draw.

    Both have shape ``(B, d + L)``; the first ``d`` columns are the parameter
    block. ``Theta2`` is zero when ``second_order`` is false.
    """
    d = setup.G.shape[1]
    if not d <= L <= setup.L_max:
        raise DomainError(f"L={L} outside [{d}, {setup.L_max}]")
    G, G2 = setup.G[:L], setup.G2[:L]
    Minv = _m0_inverse(G, setup.cov[:L, :L], setup.cutoff)
    B = setup.B
    rootT = np.sqrt(setup.T)
    sm = np.zeros((B, d + L))
    sm[:, d:] = -setup.scores[:, :L]
    a = sm @ Minv  # Minv is symmetric
    theta1 = -a
    if not second_order:
        return theta1, np.zeros_like(theta1)
    # sqrt(T) (M - M0) a: only the weighting block moves
    dcov = setup.cov_draws[:, :L, :L] - setup.cov[None, :L, :L]
    v = np.zeros((B, d + L))
    v[:, d:] = -rootT * np.einsum("bij,bj->bi", dcov, a[:, d:])
    term1 = v @ Minv
    # sum_j a_j dM/dbeta_j a
    at, al = a[:, :d], a[:, d:]
    quad = np.zeros((B, d + L))
    quad[:, :d] = -2.0 * np.einsum("ikj,bj,bi->bk", G2, at, al)
    quad[:, d:] = -np.einsum("ikj,bk,bj->bi", G2, at, at)
    theta2 = term1 - 0.5 * quad @ Minv
    return theta1, theta2


def _target_derivatives(family, theta, tau: float):
    fam = get_family(family)
    u = np.array([tau])
    return fam.quantile_grad(u, theta)[0], fam.quantile_hess(u, theta)[0]


def _rmse_from_terms(setup: ExpansionSetup, theta1, theta2, grad, hess) -> float:
    d = grad.size
    rootT = np.sqrt(setup.T)
    t1, t2 = theta1[:, :d], theta2[:, :d]
    total = (t1 + t2 / rootT) @ grad + 0.5 * np.einsum("bi,ij,bj->b", t1, hess, t1) / rootT
    return float(np.sqrt(np.mean(total**2)) / rootT)


def rmse_curve(
    setup: ExpansionSetup, tau: float, Ls: Sequence[int], second_order: bool = True
) -> dict[int, float]:
    """Estimated RMSE of ``Q(tau | theta_hat)`` for each ``L`` in ``Ls``."""
    grad, hess = _target_derivatives(setup.family, setup.theta, tau)
    out = {}
    for L in Ls:
        try:
            t1, t2 = expansion_terms(setup, int(L), second_order)
            out[int(L)] = _rmse_from_terms(setup, t1, t2, grad, hess)
        except NumericalError:
            out[int(L)] = np.inf
    return out


def estimate_rmse_for_L(
    family,
    theta,
    T: int,
    L: int,
    tau: float,
    B: int,
    rng: np.random.Generator,
    kind: str = "caglad",
    trim: tuple[float, float] = (0.0, 1.0),
    grid_H: int = DEFAULT_GRID_H,
) -> float:
    """Second-order bootstrap estimate of the RMSE of ``Q(tau | theta_hat)`` at one ``L``."""
    setup = prepare_expansion(family, theta, T, L, B, rng, kind, trim, grid_H)
    return rmse_curve(setup, tau, [L])[L]


def _argmin_smallest(curve: dict[int, float]) -> int:
    Ls = sorted(curve)
    vals = np.array([curve[L] for L in Ls])
    if not np.any(np.isfinite(vals)):
        raise NumericalError("criterion is not finite for any L")
    return Ls[int(np.argmin(np.where(np.isfinite(vals), vals, np.inf)))]


def select_L_rmse(
    s,
    family,
    tau: float,
    B: int,
    rng: np.random.Generator,
    L_range: Sequence[int] | None = None,
    kind: str = "caglad",
    trim: tuple[float, float] = (0.0, 1.0),
    grid_H: int = DEFAULT_GRID_H,
    first: FitResult | None = None,
) -> tuple[SelectionResult, FitResult]:
    """Pick ``L`` minimizing the estimated RMSE, then fit the two-step estimator there.

    The default range is ``d+1 .. min(T, 100)``; ties go to the smallest ``L``.
    """
    s = as_sample(s)
    fam = get_family(family)
    d = fam.d
    if L_range is None:
        L_range = range(d + 1, default_L_max(s.T) + 1)
    Ls = sorted(int(L) for L in L_range)
    if not Ls or Ls[0] < d:
        raise DomainError(f"L range must start at d={d} or above, got {Ls[:1]}")
    if kind == "unbiased" and Ls[-1] > s.T:
        raise DomainError("unbiased L-moments need L <= T")
    if first is None:
        first = fit_first_step(s, fam, d, trim, kind)
    setup = prepare_expansion(fam, first.theta, s.T, Ls[-1], B, rng, kind, trim, grid_H)
    curve = rmse_curve(setup, tau, Ls)
    L_star = _argmin_smallest(curve)
    fit = fit_two_step(s, fam, L_star, trim, kind, first=first, grid_H=grid_H)
    sel = SelectionResult(
        "rmse", chosen_L=L_star, criterion_curve=curve,
        bootstrap_draws=setup.B, failed_draws=setup.failed,
    )
    return sel, fit


# ----------------------------------------------------------------------------
# Lasso


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def _lasso_objective(lam, Xi, b, pen):
    return 0.5 * lam @ Xi @ lam - lam @ b + pen @ np.abs(lam)


def lasso_rows(
    Xi: np.ndarray,
    G: np.ndarray,
    k: float,
    nu: np.ndarray,
    T: int,
    tol: float = 1e-8,
    max_sweeps: int = 10_000,
) -> np.ndarray:
    """Rows ``lambda_j`` minimizing ``0.5 l'Xi l - l'G e_j + (k/T) sum nu_lj |l_l|``.

    Cyclic coordinate descent with soft-thresholding; returns a ``d x L`` array.
    Stops when no coordinate moves more than ``tol`` during a sweep.
    """
    Xi = np.asarray(Xi, dtype=float)
    G = np.atleast_2d(np.asarray(G, dtype=float))
    L, d = G.shape
    nu = np.asarray(nu, dtype=float).reshape(L, d)
    if Xi.shape != (L, L):
        raise DomainError(f"Xi must be {L}x{L}, got {Xi.shape}")
    if np.any(nu < 0) or k < 0:
        raise DomainError("penalty and loadings must be nonnegative")
    Xi = (Xi + Xi.T) / 2.0
    diag = np.diag(Xi).copy()
    out = np.zeros((d, L))
    for j in range(d):
        b = G[:, j]
        pen = k / T * nu[:, j]
        lam = np.zeros(L)
        grad_part = np.zeros(L)  # Xi @ lam
        obj = 0.0
        scale = 1.0 + np.abs(b).sum()
        for sweep in range(max_sweeps):
            max_step = 0.0
            for l in range(L):
                if diag[l] <= 0:
                    # flat coordinate: the penalty (if any) keeps it at zero
                    new = 0.0
                else:
                    r = b[l] - grad_part[l] + diag[l] * lam[l]
                    new = soft_threshold(r, pen[l]) / diag[l]
                step = new - lam[l]
                if step != 0.0:
                    grad_part += step * Xi[:, l]
                    lam[l] = new
                    max_step = max(max_step, abs(step))
            new_obj = _lasso_objective(lam, Xi, b, pen)
            if new_obj > obj + 1e-10 * scale * max(1.0, abs(obj)):
                raise NumericalError(
                    "coordinate descent objective increased",
                    {"row": j, "sweep": sweep, "before": obj, "after": new_obj},
                )
            obj = new_obj
            if max_step < tol:
                break
        else:
            raise ConvergenceError(
                f"coordinate descent did not converge in {max_sweeps} sweeps",
                best=lam.copy(), diagnostics={"row": j, "final_gap": max_step},
            )
        out[j] = lam
    return out


def lasso_penalties(
    T: int,
    L: int,
    d: int,
    theta,
    family,
    trim: tuple[float, float] = (0.0, 1.0),
    grid_H: int = DEFAULT_GRID_H,
    eps: float = 0.1,
    alpha: float | None = None,
    cov: np.ndarray | None = None,
) -> tuple[float, np.ndarray, list[str]]:
    """Penalty level ``k`` and loadings ``nu`` (``L x d``).

    ``k = (1 + eps) sqrt(T * Phi^-1(1 - alpha / (4 L d)))`` with
    ``alpha = 0.1 / log(max(T, 3))`` by default. The loading of coordinate
    ``l`` in row ``j`` bounds the delta-method standard deviation of the
    ``l``-th gradient entry ``(Sigma lam_j - G e_j)_l``, propagated from the
    just-identified preliminary estimate, with ``lam_j`` the row that uses only
    the first ``d`` moments. The two pieces are bounded separately:
    ``sd((Sigma lam_j)_l) + sd(G_lj)``. The first ``d``
    loadings are zero, so those moments are never penalized.
    """
    fam = get_family(family)
    theta = fam.validate(theta)
    if fam.d != d:
        raise DomainError(f"d={d} does not match family {fam.name} (d={fam.d})")
    if L < d:
        raise OrderConditionError(f"L={L} is below d={d}")
    notes = []
    if alpha is None:
        alpha = 0.1 / np.log(max(T, 3))
    tail = alpha / (4.0 * L * d)
    if tail >= 0.5:
        msg = f"alpha/(4Ld)={tail:.3g} >= 0.5; clamped so the normal quantile is zero"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
        tail = 0.5
    k = (1.0 + eps) * np.sqrt(T * max(stats.norm.isf(tail), 0.0))

    model = MomentModel(fam, L, trim)
    G = -model.jacobian(theta)
    G2 = -model.hessian(theta)
    if cov is None:
        cov = lmoment_covariance(fam, theta, L, trim, grid_H)
    # covariance of sqrt(T)(theta_pre - theta) for the just-identified first step
    Gd = G[:d]
    Ginv = np.linalg.inv(Gd)
    V = Ginv @ cov[:d, :d] @ Ginv.T
    # coarse plug-in for the rows: supported on the first d moments only; the
    # dense pinv(Sigma) G is numerically meaningless once Sigma is ill-conditioned
    lam0 = np.zeros((L, d))
    lam0[:d] = np.linalg.solve(cov[:d, :d], Gd)
    # d/dtheta of Sigma(theta) by central differences
    dS = np.empty((d, L, L))
    for a in range(d):
        step = 1e-5 * (1.0 + abs(theta[a]))
        e = np.zeros(d)
        e[a] = step
        dS[a] = (
            lmoment_covariance(fam, theta + e, L, trim, grid_H)
            - lmoment_covariance(fam, theta - e, L, trim, grid_H)
        ) / (2 * step)
    nu = np.zeros((L, d))
    for j in range(d):
        Am = np.einsum("alm,m->la", dS, lam0[:, j])  # d (Sigma lam_j)_l / d theta
        Bm = G2[:, j, :]  # d G_{l j} / d theta
        sd_cov = np.sqrt(np.maximum(np.einsum("la,ab,lb->l", Am, V, Am), 0.0))
        sd_g = np.sqrt(np.maximum(np.einsum("la,ab,lb->l", Bm, V, Bm), 0.0))
        nu[:, j] = sd_cov + sd_g
    nu[:d] = 0.0
    return float(k), nu, notes


def select_lasso(
    s,
    family,
    L: int | None = None,
    kind: str = "caglad",
    trim: tuple[float, float] = (0.0, 1.0),
    grid_H: int = DEFAULT_GRID_H,
    first: FitResult | None = None,
    eps: float = 0.1,
    alpha: float | None = None,
) -> SelectionResult:
    """Lasso estimate of the combination matrix and the implied moment set.

    The selected set holds every L-moment with a nonzero coefficient in at
    least one row, plus the first ``d``.
    """
    s = as_sample(s)
    fam = get_family(family)
    d = fam.d
    L = default_L_max(s.T) if L is None else int(L)
    if kind == "unbiased" and L > s.T:
        raise DomainError("unbiased L-moments need L <= T")
    if first is None:
        first = fit_first_step(s, fam, d, trim, kind)
    theta = first.theta
    cov = lmoment_covariance(fam, theta, L, trim, grid_H)
    k, nu, notes = lasso_penalties(s.T, L, d, theta, fam, trim, grid_H, eps, alpha, cov)
    G = -MomentModel(fam, L, trim).jacobian(theta)
    rows = lasso_rows(cov, G, k, nu, s.T)
    nonzero = rows != 0.0
    chosen = sorted(set(range(1, d + 1)) | set((np.nonzero(nonzero.any(axis=0))[0] + 1).tolist()))
    return SelectionResult(
        "lasso",
        chosen_L=L,
        chosen_indices=tuple(chosen),
        penalty={
            "k": k,
            "loadings": nu,
            "nonzero": nonzero.astype(int),
            "notes": notes,
        },
        combination=rows,
    )


def post_lasso_fit(
    s,
    family,
    selected: SelectionResult,
    kind: str = "caglad",
    trim: tuple[float, float] = (0.0, 1.0),
    grid_H: int = DEFAULT_GRID_H,
    first: FitResult | None = None,
) -> FitResult:
    """Two-step fit on the selected L-moments only."""
    fam = get_family(family)
    idx = selected.chosen_indices
    if idx is None:
        idx = tuple(range(1, (selected.chosen_L or 0) + 1))
    if len(idx) < fam.d:
        raise OrderConditionError(f"{len(idx)} selected moments but d={fam.d}")
    return fit_two_step(s, fam, None, trim, kind, first=first, indices=idx, grid_H=grid_H)


def lasso_fit(
    s,
    family,
    selected: SelectionResult,
    kind: str = "caglad",
    trim: tuple[float, float] = (0.0, 1.0),
    grid_H: int = DEFAULT_GRID_H,
    first: FitResult | None = None,
) -> FitResult:
    """Solve ``A h(theta) = 0`` with the Lasso combination matrix ``A``."""
    s = as_sample(s)
    fam = get_family(family)
    A = selected.combination
    if A is None:
        raise DomainError("selection carries no combination matrix")
    L = A.shape[1]
    if np.linalg.matrix_rank(A) < fam.d:
        raise NumericalError("Lasso combination matrix has rank below d")
    init = None if first is None else first.theta
    W = WeightMatrix(A.T @ A, "lasso")
    return fit_weighted(s, fam, W, L, trim, kind, init, None, grid_H=grid_H, step="lasso")
