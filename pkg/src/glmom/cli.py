"""Command-line interface: ``glmom {lmom,fit,select,mc,rct}``.

Settings come from built-in defaults, then an optional TOML file
(``--config``; either top-level keys or a table named after the command),
then explicit flags. Reports are JSON with sorted keys and embed the
resolved configuration, the seed and the package version, so identical
inputs give byte-identical output.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .errors import DomainError, GLMomError, NumericalError
from .families import get_family
from .gmlm import fit_first_step, fit_two_step, plugin_quantile
from .infer import confidence_interval, simulate_leading_term
from .lmom import Sample, caglad_lmoments, unbiased_lmoments
from .montecarlo import MIN_REPS, MCConfig, check_report, run_mc
from .rct import DEFAULT_L, RCTDataset, diff_in_means, fit_qte, rearrange_monotone
from .select import lasso_fit, post_lasso_fit, select_L_rmse, select_lasso

__all__ = ["main", "build_parser", "read_values", "read_rct"]

log = logging.getLogger("glmom")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

DEFAULTS = {
    "lmom": {"L": 4, "kind": "both", "trim": [0.0, 1.0], "rescaled": False},
    "fit": {
        "family": "gpd", "L": None, "weights": "optimal", "kind": "caglad",
        "trim": [0.0, 1.0], "grid_H": 400, "tau": [], "infer": None,
        "draws": 1000, "level": 0.9, "seed": None,
    },
    "select": {
        "family": "gev", "select": "post-lasso", "L": None, "tau": [0.999],
        "kind": "caglad", "trim": [0.0, 1.0], "grid_H": 400, "B": 300, "seed": None,
    },
    "mc": {
        "family": "gev", "theta0": None, "T": [50], "tau": [0.999],
        "estimators": ["caglad-ts"], "L_values": None, "L_max": None, "reps": 500,
        "seed": None, "grid_H": 400, "B": 300, "workers": 1, "checkpoint": None,
        "smoke": False,
    },
    "rct": {
        "K": [0, 1, 2, 3], "L": DEFAULT_L, "weights": "optimal", "grid_H": 400,
        "bandwidth": "silverman", "rearrange": False,
    },
}


class ConfigError(DomainError):
    """Bad configuration or input file."""


# ----------------------------------------------------------------------------
# input


def _rows(path: str):
    if not os.path.exists(path):
        raise ConfigError(f"input file not found: {path}")
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            cells = [c.strip() for c in row]
            if not any(cells):
                continue
            yield lineno, cells


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def read_values(path: str) -> np.ndarray:
    """One numeric column; a non-numeric first row is taken as a header."""
    out = []
    for i, (lineno, cells) in enumerate(_rows(path)):
        if len(cells) != 1:
            raise ConfigError(f"{path}:{lineno}: expected one column, got {len(cells)}")
        if not _is_number(cells[0]):
            if i == 0:
                continue
            raise ConfigError(f"{path}:{lineno}: not a number: {cells[0]!r}")
        v = float(cells[0])
        if not np.isfinite(v):
            raise ConfigError(f"{path}:{lineno}: non-finite value")
        out.append(v)
    if not out:
        raise ConfigError(f"{path}: no data")
    return np.array(out)


def read_rct(path: str) -> RCTDataset:
    """Columns ``outcome,treated`` (0/1); header optional."""
    y, d = [], []
    for i, (lineno, cells) in enumerate(_rows(path)):
        if len(cells) != 2:
            raise ConfigError(f"{path}:{lineno}: expected two columns, got {len(cells)}")
        if not (_is_number(cells[0]) and _is_number(cells[1])):
            if i == 0:
                continue
            raise ConfigError(f"{path}:{lineno}: not numeric: {cells}")
        flag = float(cells[1])
        if flag not in (0.0, 1.0):
            raise ConfigError(f"{path}:{lineno}: treated must be 0 or 1, got {cells[1]}")
        y.append(float(cells[0]))
        d.append(flag == 1.0)
    if not y:
        raise ConfigError(f"{path}: no data")
    return RCTDataset(np.array(y), np.array(d))


# ----------------------------------------------------------------------------
# configuration


def _load_toml(path: str | None, command: str) -> dict:
    if not path:
        return {}
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    table = dict(data.get(command, {}))
    top = {k: v for k, v in data.items() if not isinstance(v, dict)}
    return {**top, **table}


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the TOML file, then flags given on the command line."""
    cfg = dict(DEFAULTS[command])
    file_cfg = _load_toml(getattr(args, "config", None), command)
    for key, value in file_cfg.items():
        key = key.replace("-", "_")
        if key not in cfg:
            raise ConfigError(f"unknown {command} setting {key!r} in config file")
        cfg[key] = value
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _trim(cfg) -> tuple[float, float]:
    t = cfg["trim"]
    if len(t) != 2:
        raise ConfigError(f"trim needs two numbers, got {t}")
    return float(t[0]), float(t[1])


def _need_seed(cfg, why: str) -> int:
    if cfg.get("seed") is None:
        raise ConfigError(f"a seed is required for {why}")
    return int(cfg["seed"])


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


# ----------------------------------------------------------------------------
# output


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if np.isfinite(x) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def report(command: str, cfg: dict, result: dict, seed=None) -> str:
    body = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": cfg,
        "result": result,
    }
    return json.dumps(_clean(body), indent=2, sort_keys=True) + "\n"


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# ----------------------------------------------------------------------------
# commands


def cmd_lmom(args) -> int:
    cfg = resolve("lmom", args)
    cfg["input"] = args.input
    s = Sample(read_values(args.input))
    L, trim = int(cfg["L"]), _trim(cfg)
    result = {"T": s.T}
    if cfg["kind"] in ("caglad", "both"):
        result["caglad"] = caglad_lmoments(s, L, trim, rescaled=cfg["rescaled"]).to_dict()
    if cfg["kind"] in ("unbiased", "both"):
        if trim != (0.0, 1.0):
            raise ConfigError("unbiased L-moments are only defined without trimming")
        result["unbiased"] = unbiased_lmoments(s, L, rescaled=cfg["rescaled"]).to_dict()
    if cfg["kind"] not in ("caglad", "unbiased", "both"):
        raise ConfigError(f"unknown kind {cfg['kind']!r}")
    _emit(report("lmom", cfg, result), args.out)
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = resolve("fit", args)
    cfg["input"] = args.input
    s = Sample(read_values(args.input))
    fam = get_family(cfg["family"])
    trim, kind = _trim(cfg), cfg["kind"]
    L = fam.d if cfg["L"] is None else int(cfg["L"])
    first = fit_first_step(s, fam, fam.d, trim, kind, grid_H=cfg["grid_H"])
    if cfg["weights"] not in ("identity", "optimal"):
        raise ConfigError(f"unknown weights {cfg['weights']!r}")
    if L == fam.d:
        fit = first
    elif cfg["weights"] == "optimal":
        fit = fit_two_step(s, fam, L, trim, kind, first=first, grid_H=cfg["grid_H"])
    else:
        # identity weighting on the probability-weighted moments
        fit = fit_first_step(s, fam, L, trim, kind, first.theta, grid_H=cfg["grid_H"])
    result = {"fit": fit.to_dict(), "quantiles": []}
    for tau in _as_list(cfg["tau"]):
        q, se = plugin_quantile(fit, float(tau))
        result["quantiles"].append({"tau": float(tau), "value": q, "se": se})
    seed = cfg["seed"]
    if cfg["infer"]:
        seed = _need_seed(cfg, "inference")
        rng = np.random.default_rng(seed)
        dist = simulate_leading_term(fit, cfg["infer"], int(cfg["draws"]), rng, s=s)
        ci = confidence_interval(dist, float(cfg["level"]))
        result["inference"] = {**dist.to_dict(), "level": float(cfg["level"]), "intervals": ci}
    _emit(report("fit", cfg, result, seed), args.out)
    return EXIT_OK


def cmd_select(args) -> int:
    cfg = resolve("select", args)
    cfg["input"] = args.input
    s = Sample(read_values(args.input))
    fam = get_family(cfg["family"])
    trim, kind = _trim(cfg), cfg["kind"]
    first = fit_first_step(s, fam, fam.d, trim, kind, grid_H=cfg["grid_H"])
    method = cfg["select"]
    taus = [float(t) for t in _as_list(cfg["tau"])]
    result = {"method": method}
    seed = cfg["seed"]
    if method == "rmse":
        seed = _need_seed(cfg, "RMSE selection")
        L_max = min(s.T, 100) if cfg["L"] is None else int(cfg["L"])
        result["by_tau"] = []
        for i, tau in enumerate(taus):
            rng = np.random.default_rng([seed, i])
            sel, fit = select_L_rmse(
                s, fam, tau, int(cfg["B"]), rng, range(fam.d + 1, L_max + 1), kind, trim,
                cfg["grid_H"], first,
            )
            result["by_tau"].append({
                "tau": tau, "selection": sel.to_dict(), "fit": fit.to_dict(),
                "quantile": plugin_quantile(fit, tau)[0],
            })
    elif method in ("lasso", "post-lasso"):
        sel = select_lasso(s, fam, cfg["L"], kind, trim, cfg["grid_H"], first)
        if method == "lasso":
            fit = lasso_fit(s, fam, sel, kind, trim, cfg["grid_H"], first)
        else:
            fit = post_lasso_fit(s, fam, sel, kind, trim, cfg["grid_H"], first)
        result.update({
            "selection": sel.to_dict(),
            "selected_count": sel.n_selected,
            "fit": fit.to_dict(),
            "quantiles": [{"tau": t, "value": plugin_quantile(fit, t)[0]} for t in taus],
        })
    else:
        raise ConfigError(f"unknown selection method {method!r}")
    _emit(report("select", cfg, result, seed), args.out)
    return EXIT_OK


def cmd_mc(args) -> int:
    cfg = resolve("mc", args)
    seed = _need_seed(cfg, "Monte Carlo runs")
    fam = get_family(cfg["family"])
    theta0 = fam.default_theta if cfg["theta0"] is None else cfg["theta0"]
    try:
        mc = MCConfig(
            family=fam.name, theta0=tuple(theta0), T=tuple(_as_list(cfg["T"])),
            tau=tuple(_as_list(cfg["tau"])), estimators=tuple(_as_list(cfg["estimators"])),
            L_values=None if cfg["L_values"] is None else tuple(cfg["L_values"]),
            L_max=cfg["L_max"], reps=int(cfg["reps"]), seed=seed, grid_H=int(cfg["grid_H"]),
            B=int(cfg["B"]), workers=int(cfg["workers"]),
            min_reps=1 if cfg["smoke"] else MIN_REPS,
        )
    except DomainError as exc:
        raise ConfigError(str(exc)) from None
    start = time.perf_counter()
    rep = run_mc(mc, checkpoint=cfg["checkpoint"], version=__version__)
    log.info("mc finished in %.1f s", time.perf_counter() - start)
    body = rep.to_dict()
    text = json.dumps(_clean({"command": "mc", **body}), indent=2, sort_keys=True) + "\n"
    out = args.out
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "mc_report.json"), "w") as fh:
            fh.write(text)
        with open(os.path.join(out, "mc_report.csv"), "w") as fh:
            fh.write(rep.to_csv())
    else:
        sys.stdout.write(text)
    check_report(rep)
    return EXIT_OK


def cmd_rct(args) -> int:
    cfg = resolve("rct", args)
    cfg["input"] = args.input
    data = read_rct(args.input)
    est, se = diff_in_means(data)
    rows = []
    for K in _as_list(cfg["K"]):
        fit = fit_qte(data, int(K), int(cfg["L"]), cfg["weights"], int(cfg["grid_H"]), cfg["bandwidth"])
        row = {"K": int(K), "estimate": fit.ate, "se": fit.se_ate, "J": fit.J,
               "J_pvalue": fit.J_pvalue, "theta": fit.theta}
        if cfg["rearrange"]:
            grid = np.arange(1, 100) / 100.0
            row["qte_grid"] = grid
            row["qte_rearranged"] = rearrange_monotone(fit.qte(grid))
        rows.append(row)
    result = {
        "N0": data.N0, "N1": data.N1,
        "difference_in_means": {"estimate": est, "se": se},
        "specifications": rows,
    }
    _emit(report("rct", cfg, result), args.out)
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glmom", description="Generalized method of L-moments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="TOML file with settings")
        sp.add_argument("--out", help="output file (directory for mc)")
        if data:
            sp.add_argument("input", help="CSV input file")

    sp = sub.add_parser("lmom", help="sample L-moments")
    common(sp)
    sp.add_argument("--L", type=int)
    sp.add_argument("--kind", choices=["caglad", "unbiased", "both"])
    sp.add_argument("--trim", type=_floats)
    sp.add_argument("--rescaled", action="store_true", default=None)
    sp.set_defaults(func=cmd_lmom)

    sp = sub.add_parser("fit", help="fit a parametric family")
    common(sp)
    sp.add_argument("--family")
    sp.add_argument("--L", type=int)
    sp.add_argument("--weights", choices=["identity", "optimal"])
    sp.add_argument("--kind", choices=["caglad", "unbiased"])
    sp.add_argument("--trim", type=_floats)
    sp.add_argument("--grid-H", dest="grid_H", type=int)
    sp.add_argument("--tau", type=_floats)
    sp.add_argument("--infer", choices=["gaussian-bridge", "uniform-bk", "weighted-bootstrap"])
    sp.add_argument("--draws", type=int)
    sp.add_argument("--level", type=float)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("select", help="choose L-moments and fit")
    common(sp)
    sp.add_argument("--family")
    sp.add_argument("--select", choices=["rmse", "lasso", "post-lasso"])
    sp.add_argument("--L", type=int, help="largest L considered")
    sp.add_argument("--tau", type=_floats)
    sp.add_argument("--kind", choices=["caglad", "unbiased"])
    sp.add_argument("--trim", type=_floats)
    sp.add_argument("--grid-H", dest="grid_H", type=int)
    sp.add_argument("--B", type=int, help="bootstrap draws for RMSE selection")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_select)

    sp = sub.add_parser("mc", help="Monte Carlo comparison with maximum likelihood")
    common(sp, data=False)
    sp.add_argument("--family")
    sp.add_argument("--theta0", type=_floats)
    sp.add_argument("--T", type=_ints)
    sp.add_argument("--tau", type=_floats)
    sp.add_argument("--estimators", type=lambda t: [x.strip() for x in t.split(",") if x.strip()])
    sp.add_argument("--L", dest="L_values", type=_ints, help="scanned L values")
    sp.add_argument("--L-max", dest="L_max", type=int)
    sp.add_argument("--reps", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--grid-H", dest="grid_H", type=int)
    sp.add_argument("--B", type=int)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--checkpoint")
    sp.add_argument("--smoke", action="store_true", default=None,
                    help=f"allow fewer than {MIN_REPS} replications (schema checks only)")
    sp.set_defaults(func=cmd_mc)

    sp = sub.add_parser("rct", help="treatment effects in a randomized experiment")
    common(sp)
    sp.add_argument("--K", type=_ints)
    sp.add_argument("--L", type=int)
    sp.add_argument("--weights", choices=["identity", "optimal"])
    sp.add_argument("--grid-H", dest="grid_H", type=int)
    sp.add_argument("--bandwidth")
    sp.add_argument("--rearrange", action="store_true", default=None)
    sp.set_defaults(func=cmd_rct)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GLMomError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
