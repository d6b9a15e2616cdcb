"""Seeded Monte Carlo comparison of L-moment estimators with maximum likelihood.

Each replication draws a sample at ``theta0`` from its own generator keyed by
``(seed, replication, T)``, runs every configured estimator and the MLE, and
stores the plug-in quantile errors. Aggregation walks the replications in
order, so the report depends only on the configuration.
"""

from __future__ import annotations

import hashlib
import io
import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConvergenceError, DomainError, GLMomError, NumericalError
from .families import get_family, mle_fit
from .gmlm import DEFAULT_GRID_H, fit_first_step, fit_two_step
from .select import default_L_max, lasso_fit, post_lasso_fit, select_L_rmse, select_lasso

__all__ = ["ESTIMATORS", "MCConfig", "MCReport", "run_replication", "run_mc"]

log = logging.getLogger(__name__)

# name -> (moment kind, procedure)
ESTIMATORS = {
    "caglad-fs": ("caglad", "fs"),
    "caglad-ts": ("caglad", "ts"),
    "unbiased-fs": ("unbiased", "fs"),
    "unbiased-ts": ("unbiased", "ts"),
    "fs": ("caglad", "just-identified"),
    "ss-rmse": ("caglad", "rmse"),
    "ss-lasso": ("caglad", "lasso"),
    "ss-post-lasso": ("caglad", "post-lasso"),
}
SCANNED = {"fs", "ts"}
MIN_REPS = 50
_ERRORS = (GLMomError, np.linalg.LinAlgError, FloatingPointError)


@dataclass(frozen=True)
class MCConfig:
    family: str = "gev"
    theta0: tuple[float, ...] = (0.0, 1.0, -0.2)
    T: tuple[int, ...] = (50,)
    tau: tuple[float, ...] = (0.999,)
    estimators: tuple[str, ...] = ("caglad-ts",)
    L_values: tuple[int, ...] | None = None  # scanned L; default d..min(T, 100)
    L_max: int | None = None  # Lasso / RMSE range; default min(T, 100)
    reps: int = 500
    seed: int = 0
    grid_H: int = DEFAULT_GRID_H
    B: int = 300
    max_failure_rate: float = 0.05
    checkpoint_every: int = 100
    workers: int = 1
    min_reps: int = MIN_REPS

    def __post_init__(self):
        fam = get_family(self.family)
        th = tuple(float(x) for x in fam.validate(self.theta0))
        object.__setattr__(self, "theta0", th)
        object.__setattr__(self, "T", tuple(int(t) for t in np.atleast_1d(self.T)))
        object.__setattr__(self, "tau", tuple(float(t) for t in np.atleast_1d(self.tau)))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if self.L_values is not None:
            object.__setattr__(self, "L_values", tuple(int(L) for L in self.L_values))
        for name in self.estimators:
            if name not in ESTIMATORS:
                raise DomainError(f"unknown estimator {name!r}; choose from {sorted(ESTIMATORS)}")
        if self.reps < self.min_reps:
            raise DomainError(f"replications must be >= {self.min_reps}, got {self.reps}")
        if any(t < 2 * fam.d for t in self.T):
            raise DomainError(f"every T must be at least {2 * fam.d}")
        if any(not 0.0 < t < 1.0 for t in self.tau):
            raise DomainError("tau values must lie in (0, 1)")
        if self.L_values is not None and min(self.L_values) < fam.d:
            raise DomainError(f"scanned L values must be >= d={fam.d}")
        if self.B < 1 or self.workers < 1 or self.checkpoint_every < 1:
            raise DomainError("B, workers and checkpoint_every must be positive")

    def scan(self, T: int, kind: str) -> tuple[int, ...]:
        d = get_family(self.family).d
        Ls = self.L_values or tuple(range(d, default_L_max(T) + 1))
        return tuple(L for L in Ls if kind != "unbiased" or L <= T)

    def lmax(self, T: int) -> int:
        return self.L_max or min(T, 100)

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        body = {k: v for k, v in self.to_dict().items() if k not in ("workers", "checkpoint_every")}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


def _quantile_errors(fam, fit_theta, theta0, taus) -> list[float]:
    u = np.asarray(taus)
    return (fam.quantile(u, fit_theta) - fam.quantile(u, theta0)).tolist()


def _mle_errors(fam, s, theta0, taus, fallback):
    """MLE plug-in errors; on failure restart from the L-moment estimate."""
    try:
        res = mle_fit(fam, s)
        if res.converged:
            return _quantile_errors(fam, res.theta, theta0, taus), False
    except _ERRORS:
        pass
    if fallback is not None:
        try:
            res = mle_fit(fam, s, init=fallback)
            return _quantile_errors(fam, res.theta, theta0, taus), True
        except ConvergenceError as exc:
            if exc.best is not None:
                return _quantile_errors(fam, exc.best, theta0, taus), True
        except _ERRORS:
            pass
    return None, True


def run_replication(config: MCConfig, rep: int) -> dict:
    """All estimators for one replication; failures are recorded as ``None``."""
    fam = get_family(config.family)
    theta0 = np.asarray(config.theta0)
    d = fam.d
    taus = list(config.tau)
    out = {"rep": rep, "T": {}}
    for T in config.T:
        rng = np.random.default_rng([config.seed, rep, T])
        s = fam.sample(T, theta0, rng)
        row = {"est": {}, "selected": {}, "failures": []}
        firsts = {}

        def first(kind):
            if kind not in firsts:
                try:
                    firsts[kind] = fit_first_step(s, fam, d, moment_kind=kind)
                except _ERRORS as exc:
                    firsts[kind] = exc
            if isinstance(firsts[kind], Exception):
                raise firsts[kind]
            return firsts[kind]

        lasso_sel = None
        for name in config.estimators:
            kind, proc = ESTIMATORS[name]
            if proc in SCANNED:
                res = {}
                for L in config.scan(T, kind):
                    try:
                        if proc == "fs":
                            fit = fit_first_step(s, fam, L, moment_kind=kind, init=first(kind).theta)
                        else:
                            fit = fit_two_step(s, fam, L, moment_kind=kind, first=first(kind), grid_H=config.grid_H)
                        res[str(L)] = _quantile_errors(fam, fit.theta, theta0, taus)
                    except _ERRORS as exc:
                        res[str(L)] = None
                        row["failures"].append(f"{name} L={L}: {type(exc).__name__}")
                row["est"][name] = res
                continue
            try:
                if proc == "just-identified":
                    row["est"][name] = _quantile_errors(fam, first(kind).theta, theta0, taus)
                elif proc == "rmse":
                    errs, chosen = [], []
                    for i, tau in enumerate(taus):
                        sub = np.random.default_rng([config.seed, rep, T, 1, i])
                        sel, fit = select_L_rmse(
                            s, fam, tau, config.B, sub, range(d + 1, config.lmax(T) + 1),
                            grid_H=config.grid_H, first=first(kind),
                        )
                        errs.append(_quantile_errors(fam, fit.theta, theta0, [tau])[0])
                        chosen.append(sel.chosen_L)
                    row["est"][name] = errs
                    row["selected"][name] = chosen
                else:
                    if lasso_sel is None:
                        lasso_sel = select_lasso(
                            s, fam, config.lmax(T), grid_H=config.grid_H, first=first(kind)
                        )
                    if proc == "lasso":
                        fit = lasso_fit(s, fam, lasso_sel, grid_H=config.grid_H, first=first(kind))
                    else:
                        fit = post_lasso_fit(s, fam, lasso_sel, grid_H=config.grid_H, first=first(kind))
                    row["est"][name] = _quantile_errors(fam, fit.theta, theta0, taus)
                    row["selected"][name] = [lasso_sel.n_selected] * len(taus)
            except _ERRORS as exc:
                row["est"][name] = None
                row["failures"].append(f"{name}: {type(exc).__name__}")
        try:
            fallback = first("caglad").theta
        except _ERRORS:
            fallback = None
        row["mle"], row["mle_fallback"] = _mle_errors(fam, s, theta0, taus, fallback)
        out["T"][str(T)] = row
    return out


@dataclass
class MCReport:
    config: MCConfig
    rows: list[dict]
    failures: dict[str, float]
    status: str
    version: str
    info: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "seed": self.config.seed,
            "replications": self.config.reps,
            "config": self.config.to_dict(),
            "status": self.status,
            "failure_rates": self.failures,
            "rows": self.rows,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["estimator", "T", "tau", "ratio", "L_or_avg_selected", "rmse", "mle_rmse", "n_ok"])
        for r in self.rows:
            sel = r["best_L"] if r["best_L"] is not None else r["avg_selected"]
            w.writerow([
                r["estimator"], r["T"], r["tau"], _fmt(r["ratio"]),
                "" if sel is None else (sel if isinstance(sel, int) else _fmt(sel)),
                _fmt(r["rmse"]), _fmt(r["mle_rmse"]), r["n_ok"],
            ])
        return buf.getvalue()


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6g}"


def _rmse(errs: list) -> tuple[float | None, int]:
    vals = np.array([e for e in errs if e is not None], dtype=float)
    if vals.size == 0:
        return None, 0
    return float(np.sqrt(np.mean(vals**2))), int(vals.size)


def aggregate(config: MCConfig, records: list[dict]) -> tuple[list[dict], dict[str, float]]:
    """Relative RMSE tables from per-replication records (in replication order)."""
    rows, failures = [], {}
    n = len(records)
    for T in config.T:
        recs = [r["T"][str(T)] for r in records]
        for i, tau in enumerate(config.tau):
            mle, _ = _rmse([None if r["mle"] is None else r["mle"][i] for r in recs])
            failures[f"mle T={T}"] = sum(r["mle"] is None for r in recs) / n
            for name in config.estimators:
                kind, proc = ESTIMATORS[name]
                if proc in SCANNED:
                    curve = {}
                    for L in config.scan(T, kind):
                        errs = [None if r["est"][name][str(L)] is None else r["est"][name][str(L)][i] for r in recs]
                        rm, ok = _rmse(errs)
                        failures[f"{name} T={T} L={L}"] = (n - ok) / n
                        if rm is not None and mle:
                            curve[L] = rm / mle
                    best = min(curve, key=lambda L: (curve[L], L)) if curve else None
                    rm_best = None if best is None else curve[best] * mle
                    rows.append({
                        "estimator": name, "T": T, "tau": tau,
                        "ratio": None if best is None else curve[best],
                        "best_L": best, "avg_selected": None,
                        "rmse": rm_best, "mle_rmse": mle, "n_ok": n,
                        "curve": {str(L): v for L, v in curve.items()},
                    })
                else:
                    errs = [None if r["est"][name] is None else r["est"][name][i] for r in recs]
                    rm, ok = _rmse(errs)
                    failures[f"{name} T={T}"] = (n - ok) / n
                    sel = [r["selected"][name][i] for r in recs if name in r["selected"] and r["est"][name] is not None]
                    avg = float(np.mean(sel)) if sel else (float(get_family(config.family).d) if proc == "just-identified" else None)
                    rows.append({
                        "estimator": name, "T": T, "tau": tau,
                        "ratio": None if rm is None or not mle else rm / mle,
                        "best_L": None, "avg_selected": avg,
                        "rmse": rm, "mle_rmse": mle, "n_ok": ok,
                    })
    return rows, failures


def _load_checkpoint(path: str, config: MCConfig) -> list[dict]:
    if not path or not os.path.exists(path):
        return []
    with open(path) as fh:
        data = json.load(fh)
    if data.get("fingerprint") != config.fingerprint():
        raise DomainError(f"checkpoint {path} was written for a different configuration")
    return data["records"]


def _save_checkpoint(path: str, config: MCConfig, records: list[dict]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump({"fingerprint": config.fingerprint(), "records": records}, fh)
    os.replace(tmp, path)


def run_mc(
    config: MCConfig,
    checkpoint: str | None = None,
    version: str = "",
    stop_after: int | None = None,
) -> MCReport:
    """Run (or resume) the experiment; ``stop_after`` halts early, for testing resumes."""
    records = _load_checkpoint(checkpoint, config)
    done = len(records)
    if done:
        log.info("resuming from replication %d", done)
    todo = list(range(done, config.reps))
    if stop_after is not None:
        todo = todo[: max(0, stop_after - done)]
    pool = ProcessPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for a in range(0, len(todo), config.checkpoint_every):
            chunk = todo[a : a + config.checkpoint_every]
            if pool is None:
                records.extend(run_replication(config, r) for r in chunk)
            else:
                records.extend(pool.map(run_replication, [config] * len(chunk), chunk))
            if checkpoint:
                _save_checkpoint(checkpoint, config, records)
            log.info("%d/%d replications done", len(records), config.reps)
    finally:
        if pool is not None:
            pool.shutdown()
    if len(records) < config.reps:
        return MCReport(config, [], {}, "incomplete", version, {"done": len(records)})
    rows, failures = aggregate(config, records)
    worst = max(failures.values(), default=0.0)
    status = "ok" if worst <= config.max_failure_rate else "failed"
    return MCReport(config, rows, failures, status, version, {"records": records})


def check_report(report: MCReport) -> None:
    """Raise when the failure rate of any estimator exceeds the configured limit."""
    if report.status == "failed":
        bad = {k: v for k, v in report.failures.items() if v > report.config.max_failure_rate}
        raise NumericalError("estimator failure rate above limit", bad)
