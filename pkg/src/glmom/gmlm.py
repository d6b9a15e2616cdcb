"""Generalized method of L-moments.

The moment vector is ``h(theta) = lambda_hat - lambda(theta)`` in rescaled
L-moment coordinates: sample L-moments minus model L-moments, both integrals of
a quantile function against ``sqrt(2l-1) P*_{l-1}`` over the trimmed range.
Estimates minimize ``h' W h``.

Weight matrices are stored in L-moment coordinates. The first step uses the
identity in PWM coordinates, i.e. ``W = D' D`` with ``D`` the inverse of the
PWM-to-L-moment matrix; ``D`` has modest entries for any ``L`` while the
forward matrix grows like ``4**L``, so this direction keeps full precision.

The objective is a smooth sum of squares in ``theta`` (model moments are
integrals of a smooth quantile function), so it is minimized by a bounded
trust-region least-squares solver on the whitened residual ``R h`` with
``R'R = W``, using the analytic Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal, Sequence

import numpy as np
from numpy.typing import ArrayLike
from scipy import optimize, stats

from . import basis
from .errors import ConvergenceError, DomainError, NumericalError, OrderConditionError
from .families import Family, get_family
from .lmom import (
    LMomentVector,
    as_sample,
    c_inverse,
    c_matrix,
    caglad_lmoments,
    quadrature_rule,
    unbiased_lmoments,
)

__all__ = [
    "WeightMatrix",
    "FitResult",
    "MomentModel",
    "sample_moments",
    "objective",
    "fit_first_step",
    "fit_weighted",
    "optimal_weights",
    "lmoment_covariance",
    "kernel_covariance",
    "pwm_kernel",
    "pseudo_inverse",
    "fit_two_step",
    "plugin_quantile",
]

MomentKind = Literal["caglad", "unbiased"]
Provenance = Literal["identity", "pwm-identity", "estimated-optimal", "lasso"]

DEFAULT_GRID_H = 400
DEFAULT_CUTOFF = 1e-12
QUAD_NODES = 512


# ----------------------------------------------------------------------------
# weights


@dataclass(frozen=True)
class WeightMatrix:
    """Symmetric PSD weighting in rescaled L-moment coordinates.

    ``covariance`` holds the estimated covariance whose pseudo-inverse gave an
    optimal weighting; it is ``None`` for fixed weightings.
    """

    matrix: np.ndarray
    provenance: Provenance
    covariance: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "matrix", _symmetric_psd(self.matrix))

    @property
    def L(self) -> int:
        return self.matrix.shape[0]

    def pwm(self) -> np.ndarray:
        """The same weighting in PWM coordinates, ``C' W C``.

        Only meaningful for moderate ``L``: entries of ``C`` grow like ``4**L``.
        """
        C = c_matrix(self.L)
        return C.T @ self.matrix @ C

    def scaled(self, c: float) -> "WeightMatrix":
        return replace(self, matrix=c * self.matrix)

    def root(self) -> np.ndarray:
        """``R`` with ``R'R = W``."""
        ev, V = np.linalg.eigh(self.matrix)
        ev = np.clip(ev, 0.0, None)
        return np.sqrt(ev)[:, None] * V.T

    @classmethod
    def identity(cls, L: int) -> "WeightMatrix":
        return cls(np.eye(L), "identity")

    @classmethod
    def pwm_identity(cls, L: int) -> "WeightMatrix":
        D = c_inverse(L)
        return cls(D.T @ D, "pwm-identity")


def _symmetric_psd(a: ArrayLike) -> np.ndarray:
    a = np.array(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DomainError(f"weight matrix must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericalError("weight matrix has non-finite entries")
    a = (a + a.T) / 2.0
    ev, V = np.linalg.eigh(a)
    if ev.size and ev[0] < 0:
        a = (V * np.clip(ev, 0.0, None)) @ V.T
        a = (a + a.T) / 2.0
    a.setflags(write=False)
    return a


def pseudo_inverse(cov: np.ndarray, cutoff: float = DEFAULT_CUTOFF) -> tuple[np.ndarray, int]:
    """Moore-Penrose inverse of a symmetric PSD matrix; also returns the rank kept.

    Eigenvalues below ``cutoff`` times the largest are treated as zero.
    """
    cov = (cov + cov.T) / 2.0
    ev, V = np.linalg.eigh(cov)
    top = ev[-1] if ev.size else 0.0
    if not np.isfinite(top) or top <= 0:
        raise NumericalError("covariance matrix has no positive eigenvalue")
    keep = ev > cutoff * top
    inv = (V[:, keep] / ev[keep]) @ V[:, keep].T
    return (inv + inv.T) / 2.0, int(keep.sum())


# ----------------------------------------------------------------------------
# moment model


def _indices(L: int | None, indices: Sequence[int] | None) -> np.ndarray:
    if indices is None:
        if L is None or int(L) != L or L < 1:
            raise DomainError(f"L must be a positive integer, got {L}")
        return np.arange(1, int(L) + 1)
    idx = np.array(sorted(set(int(i) for i in indices)))
    if idx.size == 0 or idx[0] < 1:
        raise DomainError(f"moment indices must be positive, got {indices}")
    return idx


class MomentModel:
    """Model L-moments of a family and their derivatives by fixed quadrature.

    ``indices`` (one-based) selects which L-moments enter; by default ``1..L``.
    """

    def __init__(
        self,
        family,
        L: int | None = None,
        trim: tuple[float, float] = (0.0, 1.0),
        indices: Sequence[int] | None = None,
        nodes: int | None = None,
    ):
        self.family: Family = get_family(family)
        self.indices = _indices(L, indices)
        self.trim = basis.check_trim(trim)
        L_max = int(self.indices[-1])
        n = nodes or max(QUAD_NODES, 8 * L_max)
        rule = quadrature_rule(n, self.trim)
        self.u = rule.u
        self.Pw = basis.basis_values(L_max, rule.u)[self.indices - 1] * rule.w

    @property
    def L(self) -> int:
        return self.indices.size

    def moments(self, theta) -> np.ndarray:
        return self.Pw @ self.family.quantile(self.u, theta)

    def jacobian(self, theta) -> np.ndarray:
        """``d lambda(theta) / d theta``, shape ``(L, d)``."""
        return self.Pw @ self.family.quantile_grad(self.u, theta)

    def hessian(self, theta) -> np.ndarray:
        """``d2 lambda(theta) / d theta d theta'``, shape ``(L, d, d)``."""
        return np.einsum("ln,nab->lab", self.Pw, self.family.quantile_hess(self.u, theta))


def sample_moments(
    s,
    L: int,
    kind: MomentKind = "caglad",
    trim: tuple[float, float] = (0.0, 1.0),
) -> np.ndarray:
    """Rescaled sample L-moments ``1..L``."""
    if kind == "caglad":
        return caglad_lmoments(s, L, trim, rescaled=True).values
    if kind == "unbiased":
        if tuple(float(t) for t in trim) != (0.0, 1.0):
            raise DomainError("unbiased L-moments are only defined without trimming")
        return unbiased_lmoments(s, L, rescaled=True).values
    raise DomainError(f"unknown moment kind {kind!r}")


def _check_nondegenerate(lm: np.ndarray) -> None:
    if lm.size >= 2 and not lm[1] > 0:
        raise DomainError("degenerate sample: the second L-moment is zero")


# ----------------------------------------------------------------------------
# results


@dataclass(frozen=True)
class FitResult:
    theta: np.ndarray
    family: str
    L_used: int
    indices: tuple[int, ...]
    weights: WeightMatrix
    objective_value: float
    J: float | None
    J_pvalue: float | None
    acov: np.ndarray
    converged: bool
    moment_kind: MomentKind
    trim: tuple[float, float]
    T: int
    jacobian: np.ndarray  # dh/dtheta at theta (L x d)
    sample_moments: np.ndarray  # rescaled, for the indices used
    step: Literal["first", "two-step", "lasso"] = "first"
    preliminary: np.ndarray | None = None
    notes: tuple[str, ...] = ()
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def d(self) -> int:
        return self.theta.size

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "family": self.family,
            "theta": arr(self.theta),
            "L_used": self.L_used,
            "indices": list(self.indices),
            "weights": {"provenance": self.weights.provenance, "matrix": arr(self.weights.matrix)},
            "objective_value": self.objective_value,
            "J": self.J,
            "J_pvalue": self.J_pvalue,
            "acov": arr(self.acov),
            "converged": self.converged,
            "moment_kind": self.moment_kind,
            "trim": list(self.trim),
            "T": self.T,
            "step": self.step,
            "preliminary": arr(self.preliminary),
            "notes": list(self.notes),
        }


# ----------------------------------------------------------------------------
# objective and minimizer


def objective(
    data,
    family,
    theta,
    L: int,
    trim: tuple[float, float] = (0.0, 1.0),
    W: WeightMatrix | ArrayLike | None = None,
    kind: MomentKind = "caglad",
) -> float:
    """``h' W h`` at ``theta``.

    ``data`` is a sample or an :class:`LMomentVector` of sample L-moments.
    ``W`` defaults to the identity in PWM coordinates.
    """
    if isinstance(data, LMomentVector):
        lam = data.as_rescaled()[:L]
        if lam.size < L:
            raise DomainError(f"need {L} sample L-moments, got {lam.size}")
    else:
        lam = sample_moments(data, L, kind, trim)
    model = MomentModel(family, L, trim)
    h = lam - model.moments(theta)
    if W is None:
        Wm = WeightMatrix.pwm_identity(L).matrix
    else:
        Wm = W.matrix if isinstance(W, WeightMatrix) else np.asarray(W, dtype=float)
    if Wm.shape != (L, L):
        raise DomainError(f"weight matrix must be {L}x{L}, got {Wm.shape}")
    return float(h @ Wm @ h)


def _bounds(fam: Family):
    lo = np.array([-np.inf if b is None else b for b in fam.lower])
    hi = np.array([np.inf if b is None else b for b in fam.upper])
    return lo, hi


def _jitter(fam: Family, theta: np.ndarray, rng: np.random.Generator, size: float = 0.1):
    th = theta.copy()
    a, k = fam.scale_index, fam.shape_index
    z = rng.standard_normal(fam.d)
    for i in range(fam.d):
        if i == a:
            th[i] = theta[i] * np.exp(size * z[i])
        elif i == k:
            th[i] = theta[i] + size * z[i]
        else:
            th[i] = theta[i] + size * theta[a] * z[i]
    return th


def _into_box(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = np.where(np.isfinite(hi - lo), hi - lo, 1.0)
    return np.clip(x, lo + 1e-9 * span, hi - 1e-9 * span)


def _minimize(
    model: MomentModel,
    lam: np.ndarray,
    W: WeightMatrix,
    starts: list[np.ndarray],
    max_nfev: int,
):
    """Best least-squares solution over the starts; returns (theta, obj, ok, trace)."""
    fam = model.family
    R = W.root()
    lo, hi = _bounds(fam)

    def resid(th):
        return R @ (lam - model.moments(th))

    def jac(th):
        return -R @ model.jacobian(th)

    best, best_obj, best_ok, trace = None, np.inf, False, []
    for x0 in starts:
        x0 = _into_box(np.asarray(x0, dtype=float), lo, hi)
        try:
            with np.errstate(all="ignore"):
                r0 = resid(x0)
            obj0 = float(r0 @ r0)
            if not np.isfinite(obj0):
                trace.append(("nonfinite start", x0.tolist()))
                continue
            with np.errstate(all="ignore"):
                res = optimize.least_squares(
                    resid, x0, jac=jac, bounds=(lo, hi), method="trf",
                    ftol=1e-12, xtol=1e-12, gtol=1e-12, max_nfev=max_nfev,
                )
        except (DomainError, NumericalError, ValueError, FloatingPointError) as exc:
            trace.append(("error", x0.tolist(), str(exc)))
            continue
        obj = 2.0 * float(res.cost)
        ok = bool(res.status > 0) and np.isfinite(obj)
        x = res.x
        if not np.isfinite(obj) or obj > obj0:
            x, obj, ok = x0, obj0, False
        trace.append(("done", x0.tolist(), obj, int(res.status)))
        if best is None or obj < best_obj:
            best, best_obj, best_ok = x, obj, ok
    if best is None:
        raise ConvergenceError("all optimizer starts failed", diagnostics={"trace": trace})
    return best, best_obj, best_ok, trace


def _starts(fam: Family, init: np.ndarray, n_starts: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [init] + [_jitter(fam, init, rng) for _ in range(max(0, n_starts - 1))]


def _default_init(fam: Family, s, kind: MomentKind) -> np.ndarray:
    L0 = min(3, s.T)
    if kind == "unbiased" or s.T >= 3:
        lm = unbiased_lmoments(s, L0).values
    else:
        lm = caglad_lmoments(s, L0).values
    return fam.init_from_lmoments(np.pad(lm, (0, 3 - lm.size)))


def lmoment_covariance(
    family,
    theta,
    L: int | None = None,
    trim: tuple[float, float] = (0.0, 1.0),
    grid_H: int = DEFAULT_GRID_H,
    indices: Sequence[int] | None = None,
) -> np.ndarray:
    """Asymptotic covariance of ``sqrt(T) (lambda_hat - lambda)``, rescaled.

    Double midpoint sum of ``(u ^ v - u v) Q'(u) Q'(v) P_k(u) P_l(v)`` over
    ``u_i = (i - 1/2) / H`` inside the trimmed range. This equals the PWM
    kernel of :func:`pwm_kernel` rotated by ``C``, evaluated directly in the
    Legendre basis.
    """
    fam = get_family(family)
    idx = _indices(L, indices)
    u, q = _kernel_grid(fam, theta, trim, grid_H)
    return kernel_covariance(u, q, idx, grid_H)


def kernel_covariance(u: np.ndarray, qprime: np.ndarray, indices, grid_H: int) -> np.ndarray:
    """``H^-2 sum_ij (u_i ^ u_j - u_i u_j) Q'(u_i) Q'(u_j) P_k(u_i) P_l(u_j)``.

    ``u`` are midpoints of an ``H``-cell grid (possibly a subset of them) and
    ``qprime`` the quantile derivative ``1 / f(Q(u))`` there.
    """
    idx = np.asarray(indices)
    X = basis.basis_values(int(idx[-1]), u)[idx - 1] * qprime
    K = np.minimum.outer(u, u) - np.outer(u, u)
    cov = X @ K @ X.T / grid_H**2
    return (cov + cov.T) / 2.0


def _kernel_grid(fam: Family, theta, trim, grid_H: int):
    if int(grid_H) != grid_H or grid_H < 50:
        raise DomainError(f"grid_H must be an integer >= 50, got {grid_H}")
    lo, hi = basis.check_trim(trim)
    u = (np.arange(1, grid_H + 1) - 0.5) / grid_H
    u = u[(u > lo) & (u < hi)]
    if u.size == 0:
        raise DomainError("no grid points inside the trimmed range")
    with np.errstate(all="ignore"):
        q = fam.quantile_du(u, theta)
    bad = ~np.isfinite(q) | (q <= 0)
    if bad.mean() > 0.05:
        raise NumericalError(
            "density underflow at more than 5% of grid points",
            {"n_bad": int(bad.sum()), "n_grid": int(u.size)},
        )
    return u[~bad], q[~bad]


def pwm_kernel(
    family,
    theta,
    L: int,
    trim: tuple[float, float] = (0.0, 1.0),
    grid_H: int = DEFAULT_GRID_H,
) -> np.ndarray:
    """Kernel ``K[r, s] = H^-2 sum_ij (u_i ^ u_j - u_i u_j) Q'(u_i) Q'(u_j) u_i^r u_j^s``,
    ``r, s = 0..L-1``."""
    fam = get_family(family)
    u, q = _kernel_grid(fam, theta, trim, grid_H)
    X = (u[None, :] ** np.arange(L)[:, None]) * q
    K = np.minimum.outer(u, u) - np.outer(u, u)
    out = X @ K @ X.T / grid_H**2
    return (out + out.T) / 2.0


def optimal_weights(
    family,
    theta,
    L: int | None = None,
    trim: tuple[float, float] = (0.0, 1.0),
    grid_H: int = DEFAULT_GRID_H,
    cutoff: float = DEFAULT_CUTOFF,
    indices: Sequence[int] | None = None,
) -> WeightMatrix:
    """Pseudo-inverse of the estimated L-moment covariance at ``theta``."""
    cov = lmoment_covariance(family, theta, L, trim, grid_H, indices)
    omega, _ = pseudo_inverse(cov, cutoff)
    return WeightMatrix(omega, "estimated-optimal", cov)


def _sandwich(G: np.ndarray, W: np.ndarray, cov: np.ndarray) -> np.ndarray:
    A = G.T @ W @ G
    Ainv = _checked_inverse(A)
    V = Ainv @ G.T @ W @ cov @ W @ G @ Ainv
    return (V + V.T) / 2.0


def _checked_inverse(A: np.ndarray) -> np.ndarray:
    A = (A + A.T) / 2.0
    ev = np.linalg.eigvalsh(A)
    d = A.shape[0]
    tol = max(ev[-1], 0.0) * d * 1e-12
    rank = int(np.sum(ev > tol))
    if rank < d or ev[-1] <= 0:
        raise NumericalError(
            f"G' W G is singular: rank {rank} < {d} (rank defect {d - rank})",
            {"eigenvalues": ev.tolist()},
        )
    inv = np.linalg.inv(A)
    return (inv + inv.T) / 2.0


def fit_weighted(
    s,
    family,
    W: WeightMatrix,
    L: int | None = None,
    trim: tuple[float, float] = (0.0, 1.0),
    moment_kind: MomentKind = "caglad",
    init: ArrayLike | None = None,
    indices: Sequence[int] | None = None,
    n_starts: int = 5,
    seed: int = 0,
    grid_H: int = DEFAULT_GRID_H,
    step: str = "first",
    sample_lm: np.ndarray | None = None,
) -> FitResult:
    """Minimize ``h' W h`` for a given weighting.

    When ``W`` is an estimated optimal weighting, ``J = T * objective`` and the
    covariance is ``(G' W G)^-1 / T``; otherwise the covariance is the sandwich
    with the kernel covariance at the estimate.
    """
    s = as_sample(s)
    fam = get_family(family)
    idx = _indices(L, indices)
    d = fam.d
    if idx.size < d:
        raise OrderConditionError(f"need at least d={d} moments, got {idx.size}")
    if W.L != idx.size:
        raise DomainError(f"weight matrix is {W.L}x{W.L} but {idx.size} moments are used")
    L_max = int(idx[-1])
    if sample_lm is None or sample_lm.size < L_max:
        sample_lm = sample_moments(s, max(L_max, 2), moment_kind, trim)
    _check_nondegenerate(sample_lm)
    lam = sample_lm[idx - 1]
    model = MomentModel(fam, indices=idx, trim=trim)
    th0 = fam.validate(init) if init is not None else _default_init(fam, s, moment_kind)
    starts = _starts(fam, th0, n_starts, seed)
    theta, obj, ok, trace = _minimize(model, lam, W, starts, 400 * d)
    theta = fam.validate(theta)
    G = -model.jacobian(theta)
    T = s.T
    notes = []
    if W.provenance == "estimated-optimal":
        acov = _checked_inverse(G.T @ W.matrix @ G) / T
        df = idx.size - d
        J = T * obj
        if df > 0:
            pval = float(stats.chi2.sf(J, df))
        else:
            pval = None
            notes.append("just identified: J has no degrees of freedom")
    else:
        cov = lmoment_covariance(fam, theta, trim=trim, grid_H=grid_H, indices=idx)
        acov = _sandwich(G, W.matrix, cov) / T
        J, pval = None, None
    return FitResult(
        theta=theta,
        family=fam.name,
        L_used=int(idx.size),
        indices=tuple(int(i) for i in idx),
        weights=W,
        objective_value=max(obj, 0.0),
        J=None if J is None else max(J, 0.0),
        J_pvalue=pval,
        acov=acov,
        converged=ok,
        moment_kind=moment_kind,
        trim=model.trim,
        T=T,
        jacobian=G,
        sample_moments=lam,
        step=step,
        notes=tuple(notes),
        extra={"trace": trace},
    )


def fit_first_step(
    s,
    family,
    L: int,
    trim: tuple[float, float] = (0.0, 1.0),
    moment_kind: MomentKind = "caglad",
    init: ArrayLike | None = None,
    n_starts: int = 5,
    seed: int = 0,
    grid_H: int = DEFAULT_GRID_H,
    sample_lm: np.ndarray | None = None,
) -> FitResult:
    """Identity weighting in PWM coordinates, several starts."""
    fam = get_family(family)
    if int(L) != L or L < fam.d:
        raise OrderConditionError(f"L={L} is below the number of parameters d={fam.d}")
    W = WeightMatrix.pwm_identity(int(L))
    return fit_weighted(
        s, fam, W, L, trim, moment_kind, init, None, n_starts, seed, grid_H, "first", sample_lm
    )


def fit_two_step(
    s,
    family,
    L: int | None = None,
    trim: tuple[float, float] = (0.0, 1.0),
    moment_kind: MomentKind = "caglad",
    first: FitResult | None = None,
    indices: Sequence[int] | None = None,
    grid_H: int = DEFAULT_GRID_H,
    cutoff: float = DEFAULT_CUTOFF,
    n_starts: int = 5,
    seed: int = 0,
    sample_lm: np.ndarray | None = None,
) -> FitResult:
    """Just-identified first step, estimated optimal weights, refit.

    ``indices`` restricts the second step to a subset of L-moments (used by
    post-Lasso); the weighting is then the pseudo-inverse of the matching
    covariance sub-block.
    """
    s = as_sample(s)
    fam = get_family(family)
    idx = _indices(L, indices)
    if idx.size < fam.d:
        raise OrderConditionError(f"need at least d={fam.d} moments, got {idx.size}")
    if sample_lm is None or sample_lm.size < max(int(idx[-1]), fam.d):
        sample_lm = sample_moments(s, max(int(idx[-1]), fam.d, 2), moment_kind, trim)
    if first is None:
        first = fit_first_step(
            s, fam, fam.d, trim, moment_kind, None, n_starts, seed, grid_H, sample_lm
        )
    W = optimal_weights(fam, first.theta, trim=trim, grid_H=grid_H, cutoff=cutoff, indices=idx)
    fit = fit_weighted(
        s, fam, W, None, trim, moment_kind, first.theta, idx, n_starts, seed, grid_H,
        "two-step", sample_lm,
    )
    return replace(fit, preliminary=first.theta)


def plugin_quantile(fit: FitResult, tau: float) -> tuple[float, float]:
    """``Q(tau | theta_hat)`` and its delta-method standard error."""
    fam = get_family(fit.family)
    g = fam.quantile_grad(np.array([tau]), fit.theta)[0]
    value = float(fam.quantile(np.array([tau]), fit.theta)[0])
    var = float(g @ fit.acov @ g)
    return value, float(np.sqrt(max(var, 0.0)))
