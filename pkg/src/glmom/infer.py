"""Distribution of the fitted parameters by simulating the leading term.

Every mode produces draws of ``sqrt(T) (theta_hat - theta)`` through the
linear map ``-(G'WG)^-1 G'W`` applied to a simulated version of
``sqrt(T) (lambda_hat - lambda)``:

* ``gaussian-bridge``: ``-int B(u) Q'(u) P(u) du`` with ``B`` a Brownian bridge;
* ``uniform-bk``: the same with ``B`` replaced by ``sqrt(T)(F_T(u) - u)`` for
  the edf ``F_T`` of ``T`` fresh uniforms;
* ``weighted-bootstrap``: ``sqrt(T) int (Q_w - Q_hat) P du`` with ``Q_w`` the
  quantile function of the data under exchangeable exponential weights.

Process integrals use a midpoint grid. The density ``1/Q'(u)`` is evaluated
at the fitted parameters and the grid is kept ``GUARD`` away from 0 and 1.
Only iid data are covered.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy import stats

from . import basis
from .errors import DomainError, NumericalError
from .families import get_family
from .gmlm import FitResult, _checked_inverse
from .lmom import as_sample

__all__ = [
    "LeadingTermSim",
    "brownian_bridge",
    "influence_map",
    "simulate_leading_term",
    "weighted_bootstrap",
    "simulate_j_statistic",
    "confidence_interval",
    "chi2_ks_distance",
]

Mode = Literal["gaussian-bridge", "uniform-bk", "weighted-bootstrap"]
GRID_POINTS = 1024
GUARD = 1e-6
MIN_DRAWS = 200
# cap on L * draws * T cells per block of the weighted bootstrap
_BLOCK = 4_000_000


@dataclass(frozen=True)
class LeadingTermSim:
    """Draws of ``sqrt(T) (theta_hat - theta)``, one row per draw."""

    mode: Mode
    draws: np.ndarray
    theta: np.ndarray
    T: int
    grid_points: int | None = None
    warnings: tuple[str, ...] = ()
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        d = np.atleast_2d(self.draws)
        if d.shape[0] < MIN_DRAWS:
            raise DomainError(f"need at least {MIN_DRAWS} draws, got {d.shape[0]}")
        if not np.all(np.isfinite(d)):
            raise NumericalError("simulated leading term has non-finite draws")

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    def covariance(self) -> np.ndarray:
        """Sample covariance of the draws (estimates ``T * acov``)."""
        return np.atleast_2d(np.cov(self.draws, rowvar=False))

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n_draws": self.n_draws,
            "T": self.T,
            "grid_points": self.grid_points,
            "covariance": self.covariance().tolist(),
            "warnings": list(self.warnings),
        }


def influence_map(fit: FitResult) -> np.ndarray:
    """``-(G'WG)^-1 G'W``, mapping moment noise to parameter noise (``d x L``)."""
    G = np.asarray(fit.jacobian, dtype=float)
    W = fit.weights.matrix
    if W.shape[0] != G.shape[0]:
        raise DomainError("fit weights and jacobian have inconsistent sizes")
    return -_checked_inverse(G.T @ W @ G) @ G.T @ W


def _check_draws(draws: int) -> int:
    if int(draws) != draws or draws < MIN_DRAWS:
        raise DomainError(f"draws must be an integer >= {MIN_DRAWS}, got {draws}")
    return int(draws)


def _process_grid(fit: FitResult, n: int):
    """Midpoints inside the trimmed range and guard, with ``Q'(u)`` and basis rows."""
    if int(n) != n or n < 16:
        raise DomainError(f"grid_points must be an integer >= 16, got {n}")
    lo, hi = fit.trim
    u = (np.arange(1, n + 1) - 0.5) / n
    notes = []
    inside = (u > lo) & (u < hi)
    guarded = inside & (u >= GUARD) & (u <= 1.0 - GUARD)
    if guarded.sum() < inside.sum():
        notes.append(f"grid points within {GUARD} of 0 or 1 dropped")
    u = u[guarded]
    fam = get_family(fit.family)
    with np.errstate(all="ignore"):
        q = fam.quantile_du(u, fit.theta)
    bad = ~np.isfinite(q)
    if bad.any():
        msg = f"density underflow at {int(bad.sum())} grid points; those points are dropped"
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
        notes.append(msg)
        u, q = u[~bad], q[~bad]
    idx = np.asarray(fit.indices)
    P = basis.basis_values(int(idx[-1]), u)[idx - 1]
    return u, q, P, notes


def brownian_bridge(u: np.ndarray, draws: int, rng: np.random.Generator) -> np.ndarray:
    """Paths ``W(u) - u W(1)`` at increasing points ``u`` in (0, 1), one row per draw."""
    u = np.asarray(u, dtype=float)
    steps = np.concatenate(([u[0]], np.diff(u), [1.0 - u[-1]]))
    if np.any(steps < 0):
        raise DomainError("bridge points must be increasing inside [0, 1]")
    Wp = np.cumsum(rng.standard_normal((draws, u.size + 1)) * np.sqrt(steps), axis=1)
    return Wp[:, :-1] - u * Wp[:, -1:]


def simulate_leading_term(
    fit: FitResult,
    mode: Mode = "gaussian-bridge",
    draws: int = 1000,
    rng: np.random.Generator | None = None,
    grid_points: int = GRID_POINTS,
    s=None,
) -> LeadingTermSim:
    """Draws of the leading term of ``sqrt(T)(theta_hat - theta)``.

    ``s`` is only needed for ``mode="weighted-bootstrap"``.
    """
    if mode == "weighted-bootstrap":
        if s is None:
            raise DomainError("the weighted bootstrap needs the sample")
        return weighted_bootstrap(fit, s, draws, rng)
    if mode not in ("gaussian-bridge", "uniform-bk"):
        raise DomainError(f"unknown mode {mode!r}")
    draws = _check_draws(draws)
    rng = np.random.default_rng() if rng is None else rng
    u, q, P, notes = _process_grid(fit, grid_points)
    n = int(grid_points)
    if mode == "gaussian-bridge":
        zeta = brownian_bridge(u, draws, rng)
    else:
        cells = np.diff(np.concatenate(([0.0], u, [1.0])))
        counts = rng.multinomial(fit.T, cells, size=draws)
        edf = np.cumsum(counts[:, :-1], axis=1) / fit.T
        zeta = np.sqrt(fit.T) * (edf - u)
    # quantile process ~ -zeta / f(Q(u)) = -zeta Q'(u)
    v = -(zeta * q) @ P.T / n
    out = v @ influence_map(fit).T
    return LeadingTermSim(mode, out, fit.theta.copy(), fit.T, n, tuple(notes))


def weighted_bootstrap(
    fit: FitResult,
    s,
    draws: int = 1000,
    rng: np.random.Generator | None = None,
    weights: np.ndarray | None = None,
) -> LeadingTermSim:
    """Bayesian-bootstrap draws of the leading term.

    Each draw reweights the sorted sample with ``Z_t / sum Z`` for iid
    standard exponential ``Z_t`` (or the rows of ``weights`` when given),
    integrates the weighted quantile function against the basis and maps
    ``sqrt(T)`` times its gap to the unweighted one.
    """
    s = as_sample(s)
    T = s.T
    if T != fit.T:
        raise DomainError(f"sample size {T} does not match the fit (T={fit.T})")
    if weights is None:
        draws = _check_draws(draws)
        rng = np.random.default_rng() if rng is None else rng
        Z = rng.standard_exponential((draws, T))
    else:
        Z = np.atleast_2d(np.asarray(weights, dtype=float))
        if Z.shape[1] != T or np.any(Z < 0) or not np.all(Z.sum(axis=1) > 0):
            raise DomainError("weights must be nonnegative with T columns and positive row sums")
        draws = _check_draws(Z.shape[0])
    lo, hi = fit.trim
    idx = np.asarray(fit.indices)
    Lm = int(idx[-1])
    z = s.values
    base_edges = np.clip(np.arange(T + 1) / T, lo, hi)
    base = basis.step_integrals(Lm, base_edges)[idx - 1] @ z
    cum = np.cumsum(Z, axis=1)
    edges = np.zeros((draws, T + 1))
    edges[:, 1:] = cum / cum[:, -1:]
    edges[:, -1] = 1.0
    edges = np.clip(edges, lo, hi)
    lam = np.empty((draws, idx.size))
    block = max(1, _BLOCK // (Lm * (T + 1)))
    for a in range(0, draws, block):
        b = min(draws, a + block)
        lam[a:b] = (basis.step_integrals(Lm, edges[a:b])[idx - 1] @ z).T
    v = np.sqrt(T) * (lam - base)
    out = v @ influence_map(fit).T
    return LeadingTermSim("weighted-bootstrap", out, fit.theta.copy(), T)


def simulate_j_statistic(
    fit: FitResult,
    draws: int = 2000,
    rng: np.random.Generator | None = None,
    grid_points: int = GRID_POINTS,
) -> np.ndarray:
    """Leading-term draws of the J statistic ``v'(W - W G (G'WG)^-1 G'W) v``.

    ``v`` is a simulated ``sqrt(T)(lambda_hat - lambda)`` from a Brownian
    bridge. With optimal weights the draws are close to chi-squared with
    ``L - d`` degrees of freedom.
    """
    draws = _check_draws(draws)
    rng = np.random.default_rng() if rng is None else rng
    u, q, P, _ = _process_grid(fit, grid_points)
    n = int(grid_points)
    zeta = brownian_bridge(u, draws, rng)
    v = -(zeta * q) @ P.T / n
    G, W = fit.jacobian, fit.weights.matrix
    Mproj = W - W @ G @ _checked_inverse(G.T @ W @ G) @ G.T @ W
    return np.einsum("bi,ij,bj->b", v, Mproj, v)


def confidence_interval(dist: LeadingTermSim, level: float = 0.9) -> np.ndarray:
    """Equal-tailed intervals ``theta_hat - q/sqrt(T)``, shape ``(d, 2)``.

    ``q`` are the ``(1 +- level)/2`` quantiles of the simulated leading term.
    """
    level = float(level)
    if not 0.0 < level < 1.0:
        raise DomainError(f"level must lie in (0, 1), got {level}")
    draws = np.atleast_2d(dist.draws)
    q_hi = np.quantile(draws, (1.0 + level) / 2.0, axis=0)
    q_lo = np.quantile(draws, (1.0 - level) / 2.0, axis=0)
    root = np.sqrt(dist.T)
    return np.column_stack([dist.theta - q_hi / root, dist.theta - q_lo / root])


def chi2_ks_distance(values, df: int) -> float:
    """Kolmogorov-Smirnov distance between ``values`` and chi-squared(``df``)."""
    return float(stats.kstest(np.asarray(values, dtype=float), "chi2", args=(df,)).statistic)
