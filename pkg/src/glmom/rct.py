"""Treatment effects in randomized experiments through L-moments.

The quantile treatment effect is modelled as a polynomial,
``Q1(u) - Q0(u) = sum_j theta_j u^j`` for ``j = 0..K``. The moment conditions
``h_l(theta) = int (Q1_hat - Q0_hat - sum_j theta_j u^j) P_l du`` are affine in
``theta``, so every weighted fit is a linear least-squares solve.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy import stats
from scipy.special import roots_legendre

from . import basis
from .errors import DomainError, NumericalError, OrderConditionError
from .gmlm import DEFAULT_CUTOFF, DEFAULT_GRID_H, kernel_covariance, pseudo_inverse
from .lmom import caglad_lmoments

__all__ = [
    "RCTDataset",
    "QTEFit",
    "diff_in_means",
    "fit_qte",
    "polynomial_moments",
    "rearrange_monotone",
    "DEFAULT_L",
]

DEFAULT_L = 10


@dataclass(frozen=True)
class RCTDataset:
    outcomes: np.ndarray
    treated: np.ndarray

    def __post_init__(self):
        y = np.array(self.outcomes, dtype=float).ravel()
        d = np.array(self.treated).ravel()
        if y.shape != d.shape:
            raise DomainError(f"outcomes ({y.size}) and treated ({d.size}) lengths differ")
        if not np.all(np.isfinite(y)):
            raise DomainError("outcomes contain non-finite values")
        if d.dtype != bool:
            if not np.all(np.isin(d, (0, 1))):
                raise DomainError("treated must be boolean or 0/1")
            d = d.astype(bool)
        if d.sum() < 2 or (~d).sum() < 2:
            raise DomainError(f"each arm needs at least 2 units (N0={(~d).sum()}, N1={d.sum()})")
        y.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "treated", d)

    @classmethod
    def from_arms(cls, control, treated) -> "RCTDataset":
        y0 = np.asarray(control, dtype=float).ravel()
        y1 = np.asarray(treated, dtype=float).ravel()
        flags = np.concatenate([np.zeros(y0.size, bool), np.ones(y1.size, bool)])
        return cls(np.concatenate([y0, y1]), flags)

    @property
    def control_outcomes(self) -> np.ndarray:
        return self.outcomes[~self.treated]

    @property
    def treated_outcomes(self) -> np.ndarray:
        return self.outcomes[self.treated]

    @property
    def N0(self) -> int:
        return int((~self.treated).sum())

    @property
    def N1(self) -> int:
        return int(self.treated.sum())


def diff_in_means(data: RCTDataset) -> tuple[float, float]:
    """Difference in arm means and its standard error with per-arm variances."""
    y0, y1 = data.control_outcomes, data.treated_outcomes
    est = float(y1.mean() - y0.mean())
    se = float(np.sqrt(y0.var(ddof=1) / y0.size + y1.var(ddof=1) / y1.size))
    return est, se


def polynomial_moments(K: int, L: int) -> np.ndarray:
    """``B[l, j] = int_0^1 u^j P_l(u) du`` (rescaled basis), shape ``(L, K + 1)``."""
    n = (K + L) // 2 + 2
    x, w = roots_legendre(n)
    u = (x + 1.0) / 2.0
    w = w / 2.0
    P = basis.basis_values(L, u)
    return (P * w) @ (u[:, None] ** np.arange(K + 1))


@dataclass(frozen=True)
class QTEFit:
    K: int
    theta: np.ndarray
    ate: float
    se_ate: float
    acov: np.ndarray
    J: float | None
    J_pvalue: float | None
    L_used: int
    weight_mode: str
    residual: np.ndarray
    info: dict = field(default_factory=dict, compare=False)

    def qte(self, u) -> np.ndarray:
        """Fitted quantile treatment effect ``sum_j theta_j u^j``."""
        return np.polynomial.polynomial.polyval(np.asarray(u, dtype=float), self.theta)

    def qte_se(self, u) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        X = u[:, None] ** np.arange(self.K + 1)
        return np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", X, self.acov, X), 0.0))

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "theta": self.theta.tolist(),
            "ate": self.ate,
            "se_ate": self.se_ate,
            "J": self.J,
            "J_pvalue": self.J_pvalue,
            "L_used": self.L_used,
            "weight_mode": self.weight_mode,
        }


def _arm_covariance(y: np.ndarray, L: int, grid_H: int, bandwidth) -> np.ndarray:
    """Kernel covariance of one arm's rescaled sample L-moments, KDE densities."""
    z = np.sort(y)
    N = z.size
    u = (np.arange(1, grid_H + 1) - 0.5) / grid_H
    q = z[np.minimum(np.ceil(u * N).astype(int), N) - 1]
    if np.ptp(z) == 0:
        raise NumericalError("an arm has constant outcomes; its density cannot be estimated")
    kde = stats.gaussian_kde(z, bw_method=bandwidth)
    f = kde(q)
    if np.any(~np.isfinite(f) | (f <= 0)):
        raise NumericalError("kernel density vanished at an empirical quantile")
    return kernel_covariance(u, 1.0 / f, np.arange(1, L + 1), grid_H)


def fit_qte(
    data: RCTDataset,
    K: int,
    L: int = DEFAULT_L,
    weight_mode: Literal["identity", "optimal"] = "optimal",
    grid_H: int = DEFAULT_GRID_H,
    bandwidth: str | float = "silverman",
    cutoff: float = DEFAULT_CUTOFF,
) -> QTEFit:
    """Fit the polynomial QTE model by weighted L-moment matching.

    Optimal weights are the pseudo-inverse of ``c1 S1 + c0 S0`` where ``S_d``
    is the kernel covariance of arm ``d`` with Gaussian-KDE densities and
    ``c_d = min(N0, N1) / N_d``. Standard errors are scaled by ``min(N0, N1)``.
    """
    if int(K) != K or K < 0:
        raise DomainError(f"K must be a nonnegative integer, got {K}")
    if int(L) != L or L < 1:
        raise DomainError(f"L must be a positive integer, got {L}")
    K, L = int(K), int(L)
    d = K + 1
    if L < d:
        raise OrderConditionError(f"L={L} is below the number of coefficients K+1={d}")
    if weight_mode not in ("identity", "optimal"):
        raise DomainError(f"unknown weight mode {weight_mode!r}")
    y0, y1 = data.control_outcomes, data.treated_outcomes
    N0, N1 = y0.size, y1.size
    n = min(N0, N1)
    a = (
        caglad_lmoments(y1, L, rescaled=True).values
        - caglad_lmoments(y0, L, rescaled=True).values
    )
    B = polynomial_moments(K, L)
    cov = (n / N1) * _arm_covariance(y1, L, grid_H, bandwidth) + (n / N0) * _arm_covariance(
        y0, L, grid_H, bandwidth
    )
    if weight_mode == "optimal":
        W, _ = pseudo_inverse(cov, cutoff)
    else:
        W = np.eye(L)
    A = B.T @ W @ B
    Ainv, rank = pseudo_inverse(A, 1e-14)
    if rank < d:
        raise NumericalError(f"B' W B has rank {rank} < {d}")
    theta = Ainv @ B.T @ W @ a
    resid = a - B @ theta
    if weight_mode == "optimal":
        acov = Ainv / n
        df = L - d
        J = float(max(n * resid @ W @ resid, 0.0))
        pval = float(stats.chi2.sf(J, df)) if df > 0 else None
        if df == 0:
            J = None
    else:
        acov = Ainv @ B.T @ W @ cov @ W @ B @ Ainv / n
        J, pval = None, None
    acov = (acov + acov.T) / 2.0
    g = 1.0 / np.arange(1, d + 1)
    ate = float(theta @ g)
    se_ate = float(np.sqrt(max(g @ acov @ g, 0.0)))
    return QTEFit(
        K, theta, ate, se_ate, acov, J, pval, L, weight_mode, resid,
        {"N0": N0, "N1": N1, "bandwidth": bandwidth, "grid_H": grid_H},
    )


def rearrange_monotone(values) -> np.ndarray:
    """Monotone rearrangement of values on an increasing grid (a sort)."""
    v = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(v)):
        raise DomainError("values must be finite")
    return np.sort(v)
