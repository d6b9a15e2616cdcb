"""Sample and theoretical L-moments, probability-weighted moments and the C matrix.

Conventions
-----------
* Moment vectors are indexed ``l = 1..L``; entry ``l`` pairs the quantile
  function with ``P*_{l-1}``.
* "Rescaled" vectors multiply entry ``l`` by ``sqrt(2l - 1)``, i.e. they are
  coefficients in the orthonormal basis.
* The PWM vector has entries ``M_j = j * int Q(u) u^(j-1) du``, so that the
  rescaled L-moments equal ``C @ M``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np
from numpy.typing import ArrayLike
from scipy.special import comb, gammaln, roots_legendre

from . import basis
from .errors import DomainError, NumericalError

__all__ = [
    "Sample",
    "LMomentVector",
    "QuadratureRule",
    "as_sample",
    "c_matrix",
    "c_inverse",
    "caglad_lmoments",
    "unbiased_lmoments",
    "pwm_vector",
    "theoretical_lmoments",
    "quadrature_rule",
]

Kind = Literal["caglad", "unbiased", "theoretical"]

# endpoint guard for quantile functions that diverge at 0 or 1
EPS_TRIM = 1e-10
# cells processed per block when forming the step integrals
_BLOCK = 2_000_000


class Sample:
    """Immutable sorted sample."""

    __slots__ = ("_values",)

    def __init__(self, values: ArrayLike):
        z = np.array(values, dtype=float).ravel()
        if z.size < 1:
            raise DomainError("a sample needs at least one observation")
        if not np.all(np.isfinite(z)):
            raise DomainError("sample contains non-finite values")
        z.sort()
        z.setflags(write=False)
        self._values = z

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def T(self) -> int:
        return self._values.size

    def __len__(self) -> int:
        return self._values.size

    def __repr__(self) -> str:
        return f"Sample(T={self.T})"


def as_sample(s) -> Sample:
    return s if isinstance(s, Sample) else Sample(s)


@dataclass(frozen=True)
class LMomentVector:
    values: np.ndarray
    kind: Kind
    rescaled: bool = False
    trim: tuple[float, float] = (0.0, 1.0)
    warnings: tuple[str, ...] = ()
    info: dict = field(default_factory=dict, compare=False)

    @property
    def order(self) -> int:
        return len(self.values)

    def as_rescaled(self) -> np.ndarray:
        v = np.asarray(self.values, dtype=float)
        return v if self.rescaled else v * basis.rescale_factors(len(v))

    def as_plain(self) -> np.ndarray:
        v = np.asarray(self.values, dtype=float)
        return v / basis.rescale_factors(len(v)) if self.rescaled else v

    def to_dict(self) -> dict:
        return {
            "order": self.order,
            "kind": self.kind,
            "rescaled": self.rescaled,
            "trim": list(self.trim),
            "values": [float(x) for x in self.values],
            "warnings": list(self.warnings),
        }


def _check_L(L: int) -> int:
    if int(L) != L or L < 1:
        raise DomainError(f"L must be a positive integer, got {L}")
    return int(L)


def c_matrix(L: int) -> np.ndarray:
    """Lower-triangular map from PWMs to rescaled L-moments.

    ``C[i, j] = sqrt(2i - 1) / j * (-1)^(i-j) * binom(i-1, j-1) * binom(i+j-2, j-1)``
    with one-based ``i, j``. Entries grow like ``4**L``.
    """
    L = _check_L(L)
    i = np.arange(1, L + 1)[:, None]
    j = np.arange(1, L + 1)[None, :]
    sign = np.where((i - j) % 2 == 0, 1.0, -1.0)
    out = np.sqrt(2 * i - 1) / j * sign * comb(i - 1, j - 1) * comb(i + j - 2, j - 1)
    return np.tril(out)


def c_inverse(L: int) -> np.ndarray:
    """Inverse of :func:`c_matrix`, built from the expansion of monomials.

    ``u^n = sum_k (2k+1) n!^2 / ((n-k)! (n+k+1)!) P*_k(u)``; all entries are
    bounded by ``L`` so this matrix is safe to form for large ``L``.
    """
    L = _check_L(L)
    j = np.arange(1, L + 1)[:, None]
    l = np.arange(1, L + 1)[None, :]
    n, k = j - 1, l - 1
    valid = k <= n
    nk = np.where(valid, n - k, 0)
    logc = np.log(2 * k + 1) + 2 * gammaln(n + 1) - gammaln(nk + 1) - gammaln(n + k + 2)
    return np.where(valid, j * np.exp(logc) / np.sqrt(2 * k + 1), 0.0)


def pwm_vector(s, L: int, kind: Literal["caglad", "unbiased"] = "caglad") -> np.ndarray:
    """``M_1..M_L`` from the step quantile function or the unbiased formula."""
    s = as_sample(s)
    L = _check_L(L)
    z, T = s.values, s.T
    if kind == "caglad":
        t = np.arange(T + 1) / T
        j = np.arange(1, L + 1)[:, None]
        return np.diff(t[None, :] ** j, axis=1) @ z
    if kind == "unbiased":
        if L > T:
            raise DomainError(f"unbiased PWMs need L <= T (L={L}, T={T})")
        t = np.arange(1, T + 1, dtype=float)
        w = np.full(T, 1.0 / T)  # binom(t-1, 0) / binom(T, 1)
        out = np.empty(L)
        out[0] = w @ z
        for j in range(1, L):
            # binom(t-1, j) / binom(T, j+1) from the j-1 weights
            w = w * np.maximum(t - j, 0.0) / j * (j + 1) / (T - j)
            out[j] = w @ z
        return out
    raise DomainError(f"unknown PWM kind {kind!r}")


def caglad_lmoments(
    s, L: int, trim: tuple[float, float] = (0.0, 1.0), rescaled: bool = False
) -> LMomentVector:
    """L-moments of the left-continuous step quantile function.

    ``lambda_l = sum_i Z_(i) * int P*_{l-1}`` over ``((i-1)/T, i/T]`` clipped to the
    trimmed range; cells outside the range contribute nothing.
    """
    s = as_sample(s)
    L = _check_L(L)
    lo, hi = basis.check_trim(trim)
    T = s.T
    edges = np.clip(np.arange(T + 1) / T, lo, hi)
    out = np.zeros(L)
    block = max(1, _BLOCK // L)
    for a in range(0, T, block):
        b = min(T, a + block)
        out += basis.step_integrals(L, edges[a : b + 1], rescaled=rescaled) @ s.values[a:b]
    warn = ()
    if L > 10 * T:
        warn = (f"L={L} exceeds 10*T={10 * T}; the step-function estimator is unreliable",)
    return LMomentVector(out, "caglad", rescaled, (lo, hi), warn)


def _unbiased_weights(T: int, L: int) -> np.ndarray:
    """Weights ``w[r, t]`` with unbiased ``lambda_{r+1} = w[r] @ Z_sorted``.

    The rows are discrete Legendre polynomials on ``x = 0..T-1`` normalised to
    one at ``x = T-1`` and divided by ``T``; they obey a three-term recurrence,
    which avoids the alternating binomial sums of the PWM route.
    """
    x = np.arange(T, dtype=float)
    N = float(T)
    p = np.empty((L, T))
    p[0] = 1.0
    if L > 1:
        p[1] = (2 * x - N + 1) / (N - 1)
    for n in range(1, L - 1):
        p[n + 1] = ((2 * n + 1) * (2 * x - N + 1) * p[n] - n * (N + n) * p[n - 1]) / (
            (N - 1 - n) * (n + 1)
        )
    return p / N


def unbiased_lmoments(s, L: int, rescaled: bool = False) -> LMomentVector:
    """Unbiased L-moments (averages over all size-r subsamples), O(L*T)."""
    s = as_sample(s)
    L = _check_L(L)
    T = s.T
    if L > T:
        raise DomainError(f"unbiased L-moments need L <= T (L={L}, T={T})")
    out = _unbiased_weights(T, L) @ s.values
    if rescaled:
        out = out * basis.rescale_factors(L)
    warn = ()
    if L > T // 2:
        warn = (f"L={L} is close to T={T}; the unbiased estimator is erratic there",)
    return LMomentVector(out, "unbiased", rescaled, (0.0, 1.0), warn)


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights for integrals over a trimmed probability range."""

    u: np.ndarray
    w: np.ndarray
    trim: tuple[float, float]


def quadrature_rule(
    n: int, trim: tuple[float, float] = (0.0, 1.0), eps: float = EPS_TRIM
) -> QuadratureRule:
    """Gauss-Legendre rule after the substitution ``u = t - sin(2 pi t) / (2 pi)``.

    The substitution has a triple zero of ``du/dt`` at both ends, which turns
    algebraic endpoint singularities of quantile functions (``(1-u)^(-k)``,
    ``log u``) into integrands that Gauss-Legendre handles at spectral speed.
    Nodes closer than ``eps`` to 0 or 1 are pulled back to ``eps``.
    """
    lo, hi = basis.check_trim(trim)
    x, wx = roots_legendre(int(n))
    t = (x + 1.0) / 2.0
    psi = t - np.sin(2 * np.pi * t) / (2 * np.pi)
    dpsi = 1.0 - np.cos(2 * np.pi * t)
    u = lo + (hi - lo) * psi
    w = (hi - lo) * dpsi * wx / 2.0
    u = np.clip(u, max(lo, eps), min(hi, 1.0 - eps))
    return QuadratureRule(u, w, (lo, hi))


def theoretical_lmoments(
    q: Callable[[np.ndarray], np.ndarray],
    L: int,
    trim: tuple[float, float] = (0.0, 1.0),
    rescaled: bool = False,
    nodes: int = 256,
    max_nodes: int = 4096,
    rtol: float = 1e-9,
) -> LMomentVector:
    """``int Q(u) P*_{l-1}(u) du`` over the trimmed range, by quadrature.

    The node count doubles from ``nodes`` until two successive estimates agree
    to ``rtol`` (relative to the largest entry) or ``max_nodes`` is reached.
    """
    L = _check_L(L)
    lo, hi = basis.check_trim(trim)

    def estimate(n):
        rule = quadrature_rule(n, (lo, hi))
        with np.errstate(all="ignore"):
            qv = np.asarray(q(rule.u), dtype=float)
        if not np.all(np.isfinite(qv)):
            bad = rule.u[~np.isfinite(qv)]
            raise NumericalError(
                "quantile function is not finite at quadrature nodes",
                {"nodes": n, "n_bad": int(bad.size), "first_bad_u": float(bad[0])},
            )
        return basis.basis_values(L, rule.u, rescaled) @ (rule.w * qv)

    n = int(nodes)
    prev = estimate(n)
    converged, change = False, np.inf
    while n < max_nodes:
        n *= 2
        cur = estimate(n)
        scale = max(np.max(np.abs(cur)), np.finfo(float).tiny)
        change = float(np.max(np.abs(cur - prev)) / scale)
        prev = cur
        if change < rtol:
            converged = True
            break
    warn = () if converged else (f"quadrature did not reach rtol={rtol} (last change {change:.2e})",)
    return LMomentVector(
        prev, "theoretical", rescaled, (lo, hi), warn,
        {"nodes": n, "converged": converged, "last_change": change},
    )
