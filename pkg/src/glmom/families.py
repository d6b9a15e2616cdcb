"""Parametric families in Hosking's parameterization.

GEV, ``theta = (location, scale, shape)``::

    Q(u) = location + scale * (1 - (-log u)**shape) / shape

GPD with the location fixed at zero, ``theta = (scale, shape)``::

    Q(u) = scale * (1 - (1 - u)**shape) / shape

Negative shape gives a heavy upper tail. ``|shape| < 1e-7`` is evaluated on
the Gumbel / exponential limit. Both quantile functions share the form
``loc + scale * g(shape, ell(u))`` with ``g(k, x) = -expm1(k x) / k``; the
derivatives of ``g`` in ``k`` give closed-form gradients and Hessians in
``theta``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike
from scipy import optimize
from scipy.special import gamma as gamma_fn

from .errors import ConvergenceError, DomainError
from .lmom import Sample, as_sample, unbiased_lmoments

__all__ = [
    "Family",
    "GEV",
    "GPD",
    "MLEResult",
    "get_family",
    "register_family",
    "quantile",
    "dquantile_dtheta",
    "cdf",
    "pdf",
    "sample",
    "mle_fit",
]

SHAPE_ZERO = 1e-7
_SERIES_CUT = 0.1
_NTERMS = 24


def _series(x: np.ndarray, offset: int) -> np.ndarray:
    """``sum_{n >= offset} c_n x^(n-offset) / n!`` with the falling-factorial
    weights needed by :func:`_g_terms` (``offset`` in 1, 2, 3)."""
    out = np.zeros_like(x)
    fact = [1.0]
    for n in range(1, _NTERMS + offset + 1):
        fact.append(fact[-1] * n)
    for n in range(_NTERMS + offset - 1, offset - 1, -1):
        if offset == 1:
            c = 1.0
        elif offset == 2:
            c = n - 1.0
        else:
            c = (n - 1.0) * (n - 2.0)
        out = out * x + c / fact[n]
    return out


def _g_terms(k: float, ell: np.ndarray, order: int = 0):
    """``g = (1 - e^{k ell}) / k`` and its first ``order`` derivatives in ``k``."""
    if abs(k) < SHAPE_ZERO:
        k = 0.0
    x = k * ell
    small = np.abs(x) < _SERIES_CUT
    ks = k if k != 0.0 else 1.0
    with np.errstate(over="ignore", invalid="ignore"):
        ex = np.exp(x)
        em1 = np.expm1(x)
        g = np.where(small, -ell * _series(x, 1), -em1 / ks)
        out = [g]
        if order >= 1:
            num = em1 - x * ex
            out.append(np.where(small, -ell**2 * _series(x, 2), num / ks**2))
        if order >= 2:
            out.append(
                np.where(small, -ell**3 * _series(x, 3), -ell**2 * ex / ks - 2 * num / ks**3)
            )
    return out


def _log1p_ratio(k: float, y: np.ndarray) -> np.ndarray:
    """``-log1p(-k y) / k``, continuous at ``k = 0`` (where it equals ``y``)."""
    if abs(k) < SHAPE_ZERO:
        return np.asarray(y, dtype=float)
    x = k * y
    small = np.abs(x) < 1e-3
    with np.errstate(invalid="ignore", divide="ignore"):
        big = -np.log1p(-x) / k
    ser = y * (1 + x / 2 + x**2 / 3 + x**3 / 4 + x**4 / 5)
    return np.where(small, ser, big)


def _check_u(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if not np.all((u > 0.0) & (u < 1.0)):
        raise DomainError("probabilities must lie strictly inside (0, 1)")
    return u


def _uniforms(n: int, rng: np.random.Generator) -> np.ndarray:
    # midpoints of a 2^53 grid: never exactly 0 or 1
    return (rng.integers(0, 2**53, size=n) + 0.5) / 2.0**53


@dataclass(frozen=True)
class MLEResult:
    theta: np.ndarray
    loglik: float
    converged: bool
    n_iter: int
    init_loglik: float


class Family:
    """Interface every family implements; see :class:`GEV` for the template."""

    name: str = ""
    param_names: tuple[str, ...] = ()
    scale_index: int = 0
    shape_index: int = 0
    default_theta: tuple[float, ...] = ()
    # box used by the moment-based optimizers (None = unbounded)
    lower: tuple[float | None, ...] = ()
    upper: tuple[float | None, ...] = ()

    @property
    def d(self) -> int:
        return len(self.param_names)

    def validate(self, theta: ArrayLike) -> np.ndarray:
        th = np.asarray(theta, dtype=float).ravel()
        if th.size != self.d:
            raise DomainError(f"{self.name} expects {self.d} parameters, got {th.size}")
        if not np.all(np.isfinite(th)):
            raise DomainError(f"{self.name} parameters must be finite, got {th}")
        if th[self.scale_index] <= 0:
            raise DomainError(f"{self.name} scale must be positive, got {th[self.scale_index]}")
        return th

    # location / log-transform of u; implemented by subclasses
    def _loc(self, th):
        raise NotImplementedError

    def _ell(self, u):
        raise NotImplementedError

    def quantile(self, u: ArrayLike, theta: ArrayLike) -> np.ndarray:
        th = self.validate(theta)
        u = _check_u(u)
        (g,) = _g_terms(th[self.shape_index], self._ell(u))
        return self._loc(th) + th[self.scale_index] * g

    def quantile_grad(self, u: ArrayLike, theta: ArrayLike) -> np.ndarray:
        """``dQ/dtheta``; shape ``u.shape + (d,)``."""
        th = self.validate(theta)
        u = _check_u(u)
        g, gk = _g_terms(th[self.shape_index], self._ell(u), 1)
        out = np.zeros(u.shape + (self.d,))
        loc_idx = [i for i in range(self.d) if i not in (self.scale_index, self.shape_index)]
        for i in loc_idx:
            out[..., i] = 1.0
        out[..., self.scale_index] = g
        out[..., self.shape_index] = th[self.scale_index] * gk
        return out

    def quantile_hess(self, u: ArrayLike, theta: ArrayLike) -> np.ndarray:
        """``d2Q/dtheta dtheta'``; shape ``u.shape + (d, d)``."""
        th = self.validate(theta)
        u = _check_u(u)
        _, gk, gkk = _g_terms(th[self.shape_index], self._ell(u), 2)
        a, k = self.scale_index, self.shape_index
        out = np.zeros(u.shape + (self.d, self.d))
        out[..., a, k] = gk
        out[..., k, a] = gk
        out[..., k, k] = th[a] * gkk
        return out

    def quantile_du(self, u: ArrayLike, theta: ArrayLike) -> np.ndarray:
        """``dQ/du``, the reciprocal density at the quantile."""
        raise NotImplementedError

    def density_quantile(self, u: ArrayLike, theta: ArrayLike) -> np.ndarray:
        """``f(Q(u))``."""
        return 1.0 / self.quantile_du(u, theta)

    def _z(self, x, th):
        raise NotImplementedError

    def logpdf(self, x: ArrayLike, theta: ArrayLike) -> np.ndarray:
        raise NotImplementedError

    def cdf(self, x: ArrayLike, theta: ArrayLike) -> np.ndarray:
        raise NotImplementedError

    def pdf(self, x: ArrayLike, theta: ArrayLike) -> np.ndarray:
        return np.exp(self.logpdf(x, theta))

    def support(self, theta: ArrayLike) -> tuple[float, float]:
        th = self.validate(theta)
        return float(self.quantile_limit(0.0, th)), float(self.quantile_limit(1.0, th))

    def quantile_limit(self, u: float, th: np.ndarray) -> float:
        raise NotImplementedError

    def sample(self, n: int, theta: ArrayLike, rng: np.random.Generator) -> Sample:
        return Sample(self.draw(n, theta, rng))

    def draw(self, n: int, theta: ArrayLike, rng: np.random.Generator) -> np.ndarray:
        """Unsorted iid draws by inverse-cdf sampling."""
        if int(n) != n or n < 1:
            raise DomainError(f"n must be a positive integer, got {n}")
        return self.quantile(_uniforms(int(n), rng), theta)

    def init_from_lmoments(self, lmoments: ArrayLike) -> np.ndarray:
        """Closed-form starting value from plain L-moments ``(l1, l2, l3, ...)``."""
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"


class GEV(Family):
    name = "gev"
    param_names = ("location", "scale", "shape")
    scale_index = 1
    shape_index = 2
    default_theta = (0.0, 1.0, -0.2)
    lower = (None, 1e-10, -0.99)
    upper = (None, None, 5.0)

    def _loc(self, th):
        return th[0]

    def _ell(self, u):
        return np.log(-np.log(u))

    def quantile_du(self, u, theta):
        th = self.validate(theta)
        u = _check_u(u)
        s = -np.log(u)
        k = 0.0 if abs(th[2]) < SHAPE_ZERO else th[2]
        return th[1] * np.exp((k - 1.0) * np.log(s)) / u

    def quantile_limit(self, u, th):
        k = th[2]
        if u == 0.0:
            return th[0] + th[1] / k if k < -SHAPE_ZERO else -np.inf
        return th[0] + th[1] / k if k > SHAPE_ZERO else np.inf

    def _z(self, x, th):
        y = (np.asarray(x, dtype=float) - th[0]) / th[1]
        k = th[2]
        inside = (1.0 - k * y > 0) if abs(k) >= SHAPE_ZERO else np.ones(y.shape, bool)
        z = _log1p_ratio(k, np.where(inside, y, 0.0))
        return z, inside, y

    def cdf(self, x, theta):
        th = self.validate(theta)
        z, inside, y = self._z(x, th)
        with np.errstate(over="ignore"):
            f = np.exp(-np.exp(-z))
        # outside the support: below the lower end for shape < 0, above the upper end for shape > 0
        outside_val = 0.0 if th[2] < 0 else 1.0
        return np.where(inside, f, outside_val)

    def logpdf(self, x, theta):
        th = self.validate(theta)
        z, inside, _ = self._z(x, th)
        k = 0.0 if abs(th[2]) < SHAPE_ZERO else th[2]
        with np.errstate(over="ignore"):
            lp = -np.log(th[1]) - (1.0 - k) * z - np.exp(-z)
        return np.where(inside, lp, -np.inf)

    def init_from_lmoments(self, lmoments):
        l1, l2, l3 = (float(v) for v in np.asarray(lmoments)[:3])
        t3 = np.clip(l3 / l2, -0.9, 0.9) if l2 > 0 else 0.0
        c = 2.0 / (3.0 + t3) - np.log(2.0) / np.log(3.0)
        k = float(np.clip(7.8590 * c + 2.9554 * c * c, -0.9, 0.9))
        if abs(k) < 1e-6:
            a = l2 / np.log(2.0)
            return np.array([l1 - np.euler_gamma * a, a, 0.0])
        gk = gamma_fn(1.0 + k)
        a = l2 * k / ((1.0 - 2.0 ** (-k)) * gk)
        return np.array([l1 - a * (1.0 - gk) / k, a, k])


class GPD(Family):
    name = "gpd"
    param_names = ("scale", "shape")
    scale_index = 0
    shape_index = 1
    default_theta = (1.0, -0.2)
    lower = (1e-10, -0.99)
    upper = (None, 5.0)

    def _loc(self, th):
        return 0.0

    def _ell(self, u):
        return np.log1p(-u)

    def quantile_du(self, u, theta):
        th = self.validate(theta)
        u = _check_u(u)
        k = 0.0 if abs(th[1]) < SHAPE_ZERO else th[1]
        return th[0] * np.exp((k - 1.0) * np.log1p(-u))

    def quantile_limit(self, u, th):
        if u == 0.0:
            return 0.0
        return th[0] / th[1] if th[1] > SHAPE_ZERO else np.inf

    def _z(self, x, th):
        y = np.asarray(x, dtype=float) / th[0]
        k = th[1]
        inside = y >= 0
        if abs(k) >= SHAPE_ZERO:
            inside &= 1.0 - k * y > 0
        z = _log1p_ratio(k, np.where(inside, y, 0.0))
        return z, inside, y

    def cdf(self, x, theta):
        th = self.validate(theta)
        z, inside, y = self._z(x, th)
        f = -np.expm1(-z)
        return np.where(inside, f, np.where(y < 0, 0.0, 1.0))

    def logpdf(self, x, theta):
        th = self.validate(theta)
        z, inside, _ = self._z(x, th)
        k = 0.0 if abs(th[1]) < SHAPE_ZERO else th[1]
        lp = -np.log(th[0]) - (1.0 - k) * z
        return np.where(inside, lp, -np.inf)

    def init_from_lmoments(self, lmoments):
        l1, l2 = (float(v) for v in np.asarray(lmoments)[:2])
        k = float(np.clip(l1 / l2 - 2.0, -0.9, 5.0)) if l2 > 0 else 0.0
        return np.array([max((1.0 + k) * l1, 1e-8), k])


_REGISTRY: dict[str, Family] = {"gev": GEV(), "gpd": GPD()}


def register_family(family: Family) -> None:
    """Make a new family available by name to every estimator and the CLI."""
    if not family.name:
        raise DomainError("family needs a name")
    _REGISTRY[family.name.lower()] = family


def get_family(family) -> Family:
    if isinstance(family, Family):
        return family
    try:
        return _REGISTRY[str(family).lower()]
    except KeyError:
        raise DomainError(f"unknown family {family!r}; known: {sorted(_REGISTRY)}") from None


def quantile(family, u, theta):
    return get_family(family).quantile(u, theta)


def dquantile_dtheta(family, u, theta):
    return get_family(family).quantile_grad(u, theta)


def cdf(family, x, theta):
    return get_family(family).cdf(x, theta)


def pdf(family, x, theta):
    return get_family(family).pdf(x, theta)


def sample(family, n, theta, rng) -> Sample:
    return get_family(family).sample(n, theta, rng)


# MLE runs on (location..., log scale, shape) so the scale stays positive
def _to_free(fam: Family, th: np.ndarray) -> np.ndarray:
    x = th.copy()
    x[fam.scale_index] = np.log(th[fam.scale_index])
    return x


def _from_free(fam: Family, x: np.ndarray) -> np.ndarray:
    th = np.array(x, dtype=float)
    th[fam.scale_index] = np.exp(x[fam.scale_index])
    return th


def loglik(family, s, theta) -> float:
    fam = get_family(family)
    z = as_sample(s).values
    return float(np.sum(fam.logpdf(z, theta)))


def mle_fit(
    family,
    s,
    init: ArrayLike | None = None,
    max_iter: int | None = None,
    max_shape: float = 1.0,
) -> MLEResult:
    """Maximum likelihood by Nelder-Mead.

    Parameter values that leave an observation outside the support get a
    penalty that grows with the violation, so the simplex is pushed back into
    the feasible region. Shapes at or above ``max_shape`` are excluded, since
    the likelihood is unbounded there for bounded-above families.
    """
    fam = get_family(family)
    s = as_sample(s)
    z = s.values
    if s.T < 2 or z[-1] - z[0] <= 0:
        raise DomainError("degenerate sample: the likelihood is unbounded")
    if init is None:
        init = fam.init_from_lmoments(unbiased_lmoments(s, min(3, s.T)).values)
    th0 = fam.validate(init)
    scale0 = th0[fam.scale_index]

    def nll(x):
        if not np.all(np.isfinite(x)) or x[fam.shape_index] >= max_shape:
            return 1e100
        th = _from_free(fam, x)
        if not np.isfinite(th[fam.scale_index]) or th[fam.scale_index] <= 0:
            return 1e100
        lp = fam.logpdf(z, th)
        bad = ~np.isfinite(lp)
        if np.any(bad):
            # support violation: distance from the feasible endpoint, in data units
            lo, hi = fam.support(th)
            gap = np.sum(np.maximum(lo - z, 0) + np.maximum(z - hi, 0)) / scale0
            return 1e10 * (1.0 + gap + np.count_nonzero(bad))
        return -float(np.sum(lp))

    x0 = _to_free(fam, th0)
    f0 = nll(x0)
    if f0 >= 1e10:
        # infeasible start: widen the scale until every observation is inside
        for _ in range(60):
            x0[fam.scale_index] += 0.5
            f0 = nll(x0)
            if f0 < 1e10:
                break
    max_iter = max_iter or 400 * fam.d
    res = optimize.minimize(
        nll, x0, method="Nelder-Mead",
        options={"maxiter": max_iter, "maxfev": 2 * max_iter, "xatol": 1e-8, "fatol": 1e-10},
    )
    x = res.x if res.fun <= f0 else x0
    th = _from_free(fam, x)
    ll = -min(res.fun, f0)
    if ll <= -1e10 + 1:
        raise ConvergenceError("no feasible parameter value found", best=th)
    if not res.success:
        raise ConvergenceError(f"Nelder-Mead did not converge: {res.message}", best=th)
    return MLEResult(th, ll, True, int(res.nit), -f0)
