"""Shifted Legendre polynomials on [0, 1].

``P*_r(u) = P_r(2u - 1)`` where ``P_r`` is the ordinary Legendre polynomial.
The rescaled version ``sqrt(2r + 1) * P*_r`` is orthonormal on [0, 1]. Moment
vectors in this package are indexed from one, so the l-th basis function is
``P*_{l-1}`` (times ``sqrt(2l - 1)`` when rescaled).

Everything is evaluated with the three-term recurrence. The monomial
coefficients grow like ``4**r`` and lose all precision past ``r ~ 30``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike
from scipy.special import roots_legendre

from .errors import DomainError

__all__ = [
    "MAX_ORDER",
    "BasisSpec",
    "eval_shifted_legendre",
    "shifted_legendre_table",
    "antiderivative_table",
    "interval_integral",
    "basis_values",
    "step_integrals",
    "gram_matrix",
    "rescale_factors",
]

MAX_ORDER = 2000


@dataclass(frozen=True)
class BasisSpec:
    """First ``max_order`` basis functions, optionally rescaled, on a trimmed range."""

    max_order: int
    rescaled: bool = True
    trim: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if int(self.max_order) != self.max_order or self.max_order < 1:
            raise DomainError(f"max_order must be a positive integer, got {self.max_order}")
        if self.max_order > MAX_ORDER:
            raise DomainError(f"max_order {self.max_order} exceeds supported {MAX_ORDER}")
        lo, hi = check_trim(self.trim)
        object.__setattr__(self, "trim", (lo, hi))


def check_trim(trim) -> tuple[float, float]:
    lo, hi = (float(t) for t in trim)
    if not (0.0 <= lo < hi <= 1.0):
        raise DomainError(f"trim must satisfy 0 <= lower < upper <= 1, got {trim}")
    return lo, hi


def rescale_factors(n_terms: int) -> np.ndarray:
    """``sqrt(2r + 1)`` for ``r = 0..n_terms-1``."""
    return np.sqrt(2.0 * np.arange(n_terms) + 1.0)


def _check_u(u: np.ndarray) -> None:
    if not np.all((u >= 0.0) & (u <= 1.0)):
        raise DomainError("u must lie in [0, 1]")


def _check_order(r: int) -> int:
    if int(r) != r or r < 0:
        raise DomainError(f"order must be a nonnegative integer, got {r}")
    if r > MAX_ORDER:
        raise DomainError(f"order {r} exceeds supported {MAX_ORDER}")
    return int(r)


def shifted_legendre_table(n_terms: int, u: ArrayLike) -> np.ndarray:
    """Values of ``P*_0 .. P*_{n_terms-1}`` at ``u``; shape ``(n_terms, *u.shape)``."""
    u = np.asarray(u, dtype=float)
    x = 2.0 * u - 1.0
    out = np.empty((n_terms,) + u.shape)
    if n_terms == 0:
        return out
    out[0] = 1.0
    if n_terms > 1:
        out[1] = x
    for n in range(1, n_terms - 1):
        out[n + 1] = ((2 * n + 1) * x * out[n] - n * out[n - 1]) / (n + 1)
    return out


def eval_shifted_legendre(r: int, u: ArrayLike) -> np.ndarray | float:
    """``P*_r(u)`` for scalar or array ``u`` in [0, 1]."""
    r = _check_order(r)
    arr = np.asarray(u, dtype=float)
    _check_u(arr)
    val = shifted_legendre_table(r + 1, arr)[r]
    return float(val) if val.ndim == 0 else val


def antiderivative_table(n_terms: int, u: ArrayLike) -> np.ndarray:
    """``F_r(u) = int_0^u P*_r`` for ``r = 0..n_terms-1``.

    Uses ``F_0(u) = u`` and ``F_r = (P*_{r+1} - P*_{r-1}) / (2(2r + 1))``,
    which vanishes at both endpoints for ``r >= 1``.
    """
    u = np.asarray(u, dtype=float)
    p = shifted_legendre_table(n_terms + 1, u)
    out = np.empty((n_terms,) + u.shape)
    out[0] = u
    if n_terms > 1:
        r = np.arange(1, n_terms).reshape((-1,) + (1,) * u.ndim)
        out[1:] = (p[2:] - p[:-2]) / (2.0 * (2 * r + 1))
    return out


def interval_integral(r: int, a: float, b: float) -> float:
    """Exact ``int_a^b P*_r(u) du`` for ``0 <= a <= b <= 1``."""
    r = _check_order(r)
    a, b = float(a), float(b)
    if a > b:
        raise DomainError(f"interval endpoints out of order: a={a} > b={b}")
    _check_u(np.array([a, b]))
    f = antiderivative_table(r + 1, np.array([a, b]))[r]
    return float(f[1] - f[0])


def basis_values(n_terms: int, u: ArrayLike, rescaled: bool = True) -> np.ndarray:
    """Basis functions ``P_1..P_L`` at ``u``; shape ``(L, *u.shape)``."""
    p = shifted_legendre_table(n_terms, u)
    if rescaled:
        p *= rescale_factors(n_terms).reshape((-1,) + (1,) * (p.ndim - 1))
    return p


def step_integrals(n_terms: int, edges: ArrayLike, rescaled: bool = True) -> np.ndarray:
    """Integrals of ``P_1..P_L`` over consecutive cells of a sorted ``edges`` vector.

    Cells run along the last axis of ``edges``; the result has shape
    ``(L, *edges.shape[:-1], edges.shape[-1] - 1)``.
    """
    edges = np.asarray(edges, dtype=float)
    f = antiderivative_table(n_terms, edges)
    out = np.diff(f, axis=-1)
    if rescaled:
        out *= rescale_factors(n_terms).reshape((-1,) + (1,) * edges.ndim)
    return out


def gram_matrix(spec: BasisSpec) -> np.ndarray:
    """``int P_k P_l du`` over the trimmed range, exact up to rounding."""
    n = spec.max_order
    lo, hi = spec.trim
    # Gauss-Legendre with n + 1 nodes integrates degree 2n + 1 exactly
    x, w = roots_legendre(n + 1)
    u = lo + (hi - lo) * (x + 1.0) / 2.0
    w = w * (hi - lo) / 2.0
    p = basis_values(n, u, spec.rescaled)
    g = (p * w) @ p.T
    return (g + g.T) / 2.0
