"""Command-line front end: ``acedlnm fit``, ``acedlnm simulate`` and ``acedlnm curves``.

Exit status: 0 success, 2 malformed input or configuration, 3 convergence failure
(artifacts are still written, flagged as not converged).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import io as aio
from .fit import ConvergenceError, FitOptions, fit, fit_fixed_weights
from .inference import DEFAULT_DRAWS, MIN_DRAWS, CurveModel, confidence_intervals, default_grids
from .model import ModelSpec, SmoothTerm
from .splines import DomainError

EXIT_OK, EXIT_INPUT, EXIT_CONVERGENCE = 0, 2, 3
log = logging.getLogger("acedlnm")


def example_data_path() -> Path:
    return Path(str(resources.files("acedlnm") / "data" / "example.csv"))


# ---------------------------------------------------------------- config
FIT_DEFAULTS = {
    "input": None,
    "time": "date",
    "response": "count",
    "exposure": "exposure",
    "smooth": [],            # ["name" or "name:knots"]
    "linear": [],
    "max_lag": 15.0,
    "n_knots_w": 20,
    "n_knots_f": 20,
    "fixed_weights": None,
    "ci": "sampling",
    "draws": DEFAULT_DRAWS,
    "seed": 0,
    "grid_points": 100,
    "tol_inner": 1e-7,
    "tol_middle": 1e-6,
    "tol_outer": 1e-4,
}


def _load_config_file(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise aio.InputError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise aio.InputError(f"config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise aio.InputError(f"config {path}: expected a JSON object")
    return cfg


def _merge(defaults: dict, file_cfg: dict, args: argparse.Namespace) -> dict:
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        raise aio.InputError(f"unknown config key(s): {sorted(unknown)}")
    cfg = {**defaults, **file_cfg}
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None and v != []:
            cfg[k] = v
    return cfg


def _smooth_terms(entries):
    terms = []
    for e in entries:
        name, _, k = str(e).partition(":")
        try:
            terms.append(SmoothTerm(name, int(k)) if k else SmoothTerm(name))
        except ValueError:
            raise aio.InputError(f"bad smooth term {e!r}; use NAME or NAME:KNOTS") from None
    return tuple(terms)


def _fit_spec(cfg) -> ModelSpec:
    if not cfg["max_lag"] >= 1:
        raise aio.InputError("max_lag must be at least 1")
    try:
        return ModelSpec(max_lag=float(cfg["max_lag"]), n_knots_w=int(cfg["n_knots_w"]),
                         n_knots_f=int(cfg["n_knots_f"]), smooth=_smooth_terms(cfg["smooth"]),
                         linear=tuple(cfg["linear"]))
    except (TypeError, ValueError) as exc:
        raise aio.InputError(str(exc)) from None


def _fixed_weights(value):
    if value is None:
        return None
    if isinstance(value, str) and "," in value:
        try:
            return [float(v) for v in value.split(",")]
        except ValueError:
            raise aio.InputError(f"bad fixed weights {value!r}") from None
    return value


def _check_draws(draws):
    if not isinstance(draws, int) or draws < MIN_DRAWS:
        raise aio.InputError(f"draws must be an integer of at least {MIN_DRAWS}")


# ---------------------------------------------------------------- fit
def _fit_record(res, cfg, digest, input_hash, grids, curves_ok) -> dict:
    m = res.model
    coef = {"alpha_f": res.alpha_f, "beta": dict(zip(_beta_names(m), res.beta.tolist()))}
    if m.free_w:
        coef["phi"] = res.phi
        coef["alpha_w_plus"] = res.alpha_w_plus()
    else:
        coef["fixed_weights"] = m.fixed
    return {
        "schema": aio.SCHEMA_VERSION,
        "config": cfg,
        "config_hash": digest,
        "seed": cfg["seed"],
        "input_sha256": input_hash,
        "converged": bool(res.converged),
        "message": res.message,
        "iterations": res.n_iter,
        "laml": res.laml,
        "laml_gradient": res.laml_grad,
        "loglik": res.loglik,
        "edf": res.edf,
        "aic": res.aic,
        "theta": res.theta,
        "smoothing": res.smoothing,
        "log_hyperparameters": res.rho_hat,
        "ace_bound": m.bound.e_bar,
        "n_observations": int(len(m.y)),
        "coefficients": coef,
        "curve_model": CurveModel.from_fit(res).to_dict(),
        "grids": {k: v for k, v in grids.items()},
        "curve_order": list(grids),
        "intervals_computed": curves_ok,
    }


def _beta_names(m):
    names = []
    for sm in m.smooths:
        names += [f"{sm.name}[{j}]" for j in range(sm.centering.shape[1])]
    return names + list(m.linear_names)


def _manifest(command, cfg, digest, artifacts: dict, extra=None) -> dict:
    from importlib.metadata import PackageNotFoundError, version
    try:
        ver = version("artifact")
    except PackageNotFoundError:
        ver = "unknown"
    out = {"schema": aio.SCHEMA_VERSION, "command": command, "config_hash": digest, "seed": cfg.get("seed"),
           "package_version": ver,
           "artifacts": {name: aio.file_hash(path) for name, path in sorted(artifacts.items())}}
    if extra:
        out.update(extra)
    return out


def cmd_fit(args) -> int:
    file_cfg = _load_config_file(args.config) if args.config else {}
    cfg = _merge(FIT_DEFAULTS, file_cfg, args)
    if args.example:
        cfg["input"] = str(example_data_path())
        for k, v in EXAMPLE_COLUMNS.items():
            if getattr(args, k, None) in (None, []) and k not in file_cfg:
                cfg[k] = v
    if cfg["input"] is None:
        raise aio.InputError("no input file given")
    if cfg["ci"] not in ("sampling", "delta"):
        raise aio.InputError(f"unknown interval method {cfg['ci']!r}")
    _check_draws(cfg["draws"])
    spec = _fit_spec(cfg)
    covs = [t.name for t in spec.smooth] + list(spec.linear)
    data = aio.read_dataset(cfg["input"], cfg["time"], cfg["response"], cfg["exposure"], covs)
    input_hash = aio.file_hash(cfg["input"])
    cfg_for_hash = {k: v for k, v in cfg.items() if k != "input"}
    digest = aio.config_hash({**cfg_for_hash, "input_sha256": input_hash})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    options = FitOptions(tol_inner=float(cfg["tol_inner"]), tol_middle=float(cfg["tol_middle"]),
                         tol_outer=float(cfg["tol_outer"]), record=False)
    fixed = _fixed_weights(cfg["fixed_weights"])
    try:
        res = fit(spec, data, options) if fixed is None else fit_fixed_weights(spec, data, fixed, options)
    except ConvergenceError as exc:
        record = {"schema": aio.SCHEMA_VERSION, "config": cfg, "config_hash": digest, "seed": cfg["seed"],
                  "input_sha256": input_hash, "converged": False, "message": str(exc)}
        aio.write_json(out / "fit.json", record)
        aio.write_json(out / "manifest.json", _manifest("fit", cfg, digest, {"fit.json": out / "fit.json"}))
        print(f"error: fit failed to converge: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (ValueError, KeyError) as exc:
        raise aio.InputError(str(exc)) from None
    grids = default_grids(res, int(cfg["grid_points"]))
    curves_ok = True
    try:
        curves = confidence_intervals(res, grids, cfg["ci"], int(cfg["draws"]), seed=int(cfg["seed"]))
    except np.linalg.LinAlgError as exc:
        from .inference import evaluate_curves
        log.warning("intervals unavailable: %s", exc)
        curves, curves_ok = evaluate_curves(res, grids), False
    aio.write_json(out / "fit.json", _fit_record(res, cfg, digest, input_hash, grids, curves_ok))
    aio.write_curves(out / "curves.csv", curves)
    aio.write_json(out / "manifest.json", _manifest(
        "fit", cfg, digest, {"fit.json": out / "fit.json", "curves.csv": out / "curves.csv"}))
    print(f"AIC {res.aic:.4f}  theta {res.theta:.4f}  converged {res.converged}  -> {out}")
    if not res.converged:
        print(f"error: outer optimization did not converge: {res.message}", file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


EXAMPLE_COLUMNS = {"time": "date", "response": "count", "exposure": "exposure", "smooth": ["time:10"]}


# ---------------------------------------------------------------- simulate
SIM_DEFAULTS = {
    "scenario": "simA",
    "w_type": 1,
    "f_type": 1,
    "n": None,
    "reps": 100,
    "seed": 1,
    "theta": 8.0,
    "draws": DEFAULT_DRAWS,
    "exposure_file": None,
}
_TYPES = {1: "i", 2: "ii", 3: "iii"}


def _scenario(cfg):
    from .simulate import ScenarioSpec
    if cfg["scenario"] not in ("simA", "simB"):
        raise aio.InputError(f"unknown scenario {cfg['scenario']!r}; use simA or simB")
    try:
        w_type, f_type = int(cfg["w_type"]), int(cfg["f_type"])
        if w_type not in _TYPES or f_type not in _TYPES:
            raise ValueError("types must be 1, 2 or 3")
        n = cfg["n"] if cfg["n"] is not None else (1000 if cfg["scenario"] == "simA" else 2000)
        return ScenarioSpec(w_kind="discrete" if cfg["scenario"] == "simB" else _TYPES[w_type],
                            f_kind=_TYPES[f_type], n=int(n), n_rep=int(cfg["reps"]), seed=int(cfg["seed"]),
                            theta=float(cfg["theta"]), n_draws=int(cfg["draws"]),
                            exposure_file=cfg["exposure_file"])
    except (TypeError, ValueError) as exc:
        raise aio.InputError(f"bad scenario: {exc}") from None


METRICS_HEADER = ["row", "status", "rmse_w", "cvg_w", "width_w", "width_w_delta", "rmse_f", "cvg_f", "width_f",
                  "rmse_h", "theta_bias", "theta_rmse", "n_ok", "n_failed"]
COMPARISON_HEADER = ["row", "model", "rmse_f_exposure", "mc_se", "n_ok"]


def cmd_simulate(args) -> int:
    from .simulate import run_comparison, run_scenario
    cfg = _merge(SIM_DEFAULTS, _load_config_file(args.config) if args.config else {}, args)
    _check_draws(cfg["draws"])
    sc = _scenario(cfg)
    digest = aio.config_hash(asdict(sc) | {"scenario": cfg["scenario"]})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg["scenario"] == "simA":
        summary = run_scenario(sc, workers=args.workers)
        rows = []
        for r in summary.rows():
            rep = r["row"].startswith("rep")
            status = "summary"
            if rep:
                status = "ok" if r["n_ok"] else "failed: " + summary.replicates[int(r["row"][3:])].message
            rows.append({**r, "status": status})
        aio.write_csv(out / "metrics.csv", METRICS_HEADER, rows)
        record = {"scenario": cfg["scenario"], "spec": asdict(sc), "config_hash": digest, "n_ok": summary.n_ok,
                  "n_failed": summary.n_failed, "mean": summary.mean, "mc_se": summary.mc_se,
                  "theta_bias": summary.theta_bias, "theta_rmse": summary.theta_rmse,
                  "replicates": [{k: v for k, v in asdict(r).items() if k != "seconds"}
                                 for r in summary.replicates]}
        failed = summary.n_ok == 0
    else:
        summary = run_comparison(sc, workers=args.workers)
        rows = [{"row": "summary", "model": m, "rmse_f_exposure": summary.rmse[m], "mc_se": summary.mc_se[m],
                 "n_ok": summary.n_ok[m]} for m in summary.models]
        for i, rep in enumerate(summary.replicates):
            rows += [{"row": f"rep{i}", "model": m, "rmse_f_exposure": rep[m]} for m in summary.models]
        aio.write_csv(out / "metrics.csv", COMPARISON_HEADER, rows)
        record = {"scenario": cfg["scenario"], "spec": asdict(sc), "config_hash": digest,
                  "rmse": summary.rmse, "mc_se": summary.mc_se, "n_ok": summary.n_ok,
                  "replicates": summary.replicates}
        failed = summary.n_ok["ace"] == 0
    aio.write_json(out / "metrics.json", record)
    aio.write_json(out / "manifest.json", _manifest(
        "simulate", {"seed": sc.seed}, digest,
        {"metrics.csv": out / "metrics.csv", "metrics.json": out / "metrics.json"}))
    print(f"wrote {out / 'metrics.csv'}")
    return EXIT_CONVERGENCE if failed else EXIT_OK


# ---------------------------------------------------------------- curves
def _parse_grid(text):
    kind, sep, body = text.partition("=")
    parts = body.split(":")
    if not sep or len(parts) != 3:
        raise aio.InputError(f"bad grid {text!r}; use CURVE=LO:HI:N")
    try:
        lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise aio.InputError(f"bad grid {text!r}; use CURVE=LO:HI:N") from None
    if n < 1:
        raise aio.InputError(f"grid {text!r} needs at least one point")
    return kind, np.linspace(lo, hi, n)


def cmd_curves(args) -> int:
    try:
        record = json.loads(Path(args.fit).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise aio.InputError(f"cannot read fit artifact {args.fit}: {exc}") from None
    if record.get("schema") != aio.SCHEMA_VERSION or "curve_model" not in record:
        raise aio.InputError(f"{args.fit}: not a fit artifact with schema {aio.SCHEMA_VERSION}")
    cm = CurveModel.from_dict(record["curve_model"])
    if args.grid:
        grids = dict(_parse_grid(g) for g in args.grid)
    else:
        stored = record["grids"]
        grids = {k: np.asarray(stored[k], dtype=float) for k in record.get("curve_order", sorted(stored))}
    method = args.ci or record["config"].get("ci", "sampling")
    draws = args.draws if args.draws is not None else int(record["config"].get("draws", DEFAULT_DRAWS))
    seed = args.seed if args.seed is not None else int(record["config"].get("seed", 0))
    if method == "sampling":
        _check_draws(draws)
    try:
        if method == "none":
            from .inference import evaluate_curves
            curves = evaluate_curves(cm, grids)
        else:
            curves = confidence_intervals(cm, grids, method, draws, seed=seed)
    except (DomainError, KeyError) as exc:
        raise aio.InputError(str(exc).strip("'\"")) from None
    aio.write_curves(args.out, curves)
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="acedlnm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log optimizer progress")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a model to a daily CSV series")
    f.add_argument("input", nargs="?", help="CSV file with a header row")
    f.add_argument("--example", action="store_true", help="use the bundled synthetic dataset")
    f.add_argument("--config", help="JSON file with fit settings (flags override)")
    f.add_argument("--time", help="time column: integer day index or ISO-8601 date")
    f.add_argument("--response", help="count column")
    f.add_argument("--exposure", help="exposure column")
    f.add_argument("--smooth", action="append", default=[], metavar="NAME[:KNOTS]",
                   help="covariate with a penalized smooth (repeatable)")
    f.add_argument("--linear", action="append", default=[], metavar="NAME", help="linear covariate (repeatable)")
    f.add_argument("--max-lag", dest="max_lag", type=float)
    f.add_argument("--n-knots-w", dest="n_knots_w", type=int)
    f.add_argument("--n-knots-f", dest="n_knots_f", type=int)
    f.add_argument("--fixed-weights", dest="fixed_weights",
                   help="lag0, avgA-B or comma-separated weights: fit a fixed-window model instead")
    f.add_argument("--ci", choices=["sampling", "delta"])
    f.add_argument("--draws", type=int, help="coefficient draws for sampling intervals")
    f.add_argument("--seed", type=int)
    f.add_argument("--grid-points", dest="grid_points", type=int)
    f.add_argument("--tol-inner", dest="tol_inner", type=float)
    f.add_argument("--tol-middle", dest="tol_middle", type=float)
    f.add_argument("--tol-outer", dest="tol_outer", type=float)
    f.add_argument("--out", required=True, help="output directory")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="run a simulation scenario")
    s.add_argument("--config", help="JSON scenario file (flags override)")
    s.add_argument("--scenario", choices=["simA", "simB"])
    s.add_argument("--w-type", dest="w_type", type=int, choices=[1, 2, 3])
    s.add_argument("--f-type", dest="f_type", type=int, choices=[1, 2, 3])
    s.add_argument("--n", type=int)
    s.add_argument("--reps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--theta", type=float)
    s.add_argument("--draws", type=int)
    s.add_argument("--exposure-file", dest="exposure_file")
    s.add_argument("--workers", type=int, help="worker processes (default: ACEDLNM_WORKERS or CPU count)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("curves", help="re-evaluate curves from a stored fit")
    c.add_argument("fit", help="fit.json from `acedlnm fit`")
    c.add_argument("--grid", action="append", default=[], metavar="CURVE=LO:HI:N",
                   help="evaluation grid, e.g. w=0:15:151 (repeatable; default: the fit-time grids)")
    c.add_argument("--ci", choices=["sampling", "delta", "none"])
    c.add_argument("--draws", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--out", required=True, help="output CSV path")
    c.set_defaults(func=cmd_curves)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except aio.InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
