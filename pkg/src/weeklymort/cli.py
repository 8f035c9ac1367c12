"""Command-line pipeline: ingest, fit, select, rr, forecast, evaluate, synth.

Every subcommand reads one YAML config, writes its artifacts into ``--out``
and refreshes ``manifest.txt`` there (sha256 and relative path per file).

Config keys (all optional except ``data`` for the data-driven commands)::

    data:       deaths, population, ili, adjacency, temperature_grid | covariates
    index:      calibration: [first, last], holdout: [first, last], ages, regions
    dlnm:       temperature: {max_lag, knot_percentiles, lag_knots}
                ili: {max_lag, lag_knots, threshold_quantile}
    smoothing:  psi1, psi2, grid1, grid2 (explicit lists) or
                grid: {log10_start, log10_stop, log10_step}
    fit:        tol_ll, grad_tol, max_iter, refine
    sarimax:    temperature | ili | kappa: {order, seasonal, period, drift}
    copula:     temperature, ili, kappa (gaussian | student-t)
    forecast:   horizon, n_sims, exposures (auto | hold | observed)
    rr:         n_grid, lag_step, lag_percentile
    reference:  scores (CSV of model,age_group,metric,value), rtol
    seed:       root seed for every random stream
    synth:      fields of SynthConfig plus seed and holdout_years
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import warnings
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import pandas as pd
import yaml
from threadpoolctl import threadpool_limits

from .crossbasis import DesignSpec, design_matrices, ili_spec, temperature_spec
from .data_model import N_WEEKS
from .estimation import DEFAULT_GRID, FitConfig, FitResult, fit_model, select_smoothing
from .evaluation import compare_scores, fit_pearson, scores_frame
from .forecast import MODES, ForecastSet, forecast_model
from .ingest import (
    SchemaError,
    interpolate_exposure,
    load_csv_inputs,
    read_covariates,
    read_population,
)
from .likelihood import ModelData, NumericalError, PenaltyConfig, build_laplacian
from .relative_risk import curves_frame, rr_by_lag, rr_overall, rr_surface
from .synthetic import SynthConfig, generate, write_csv_inputs
from .timeseries import (
    ILI_SPEC,
    KAPPA_SPEC,
    TEMP_SPEC,
    SarimaxSpec,
    fit_drivers,
    paths_frame,
    simulate_joint,
)

log = logging.getLogger("weeklymort")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CONVERGENCE, EXIT_NUMERICAL = 0, 2, 3, 4, 5
DATA_KEYS = ("deaths", "population", "ili", "adjacency", "temperature_grid", "covariates")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config

def load_config(path):
    if path is None:
        return {}, Path(".")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    try:
        cfg = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {p}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping")
    return cfg, p.resolve().parent


def _section(cfg, name):
    sec = cfg.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    return sec


def _year_range(value, what):
    try:
        a, b = (int(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"index.{what} must be [first_year, last_year]") from exc
    if b < a:
        raise ConfigError(f"index.{what}: last year before first year")
    return tuple(range(a, b + 1))


def data_paths(cfg, base):
    data = _section(cfg, "data")
    paths = {}
    for k in DATA_KEYS:
        if data.get(k):
            p = Path(data[k])
            paths[k] = p if p.is_absolute() else base / p
    required = ["deaths", "population", "adjacency"]
    if "covariates" not in paths:
        required += ["temperature_grid", "ili"]
    for k in required:
        if k not in paths:
            raise ConfigError(f"data.{k} is required")
    for k, p in paths.items():
        if not p.is_file():
            raise ConfigError(f"data.{k}: file {p} not found")
    return paths


def calibration_years(cfg):
    idx = _section(cfg, "index")
    return _year_range(idx["calibration"], "calibration") if idx.get("calibration") else None


def holdout_years(cfg):
    idx = _section(cfg, "index")
    return _year_range(idx["holdout"], "holdout") if idx.get("holdout") else None


def fit_config(cfg):
    sec = _section(cfg, "fit")
    known = {f.name for f in fields(FitConfig)}
    unknown = set(sec) - known
    if unknown:
        raise ConfigError(f"unknown fit keys {sorted(unknown)}")
    return FitConfig(**sec)


def _grid(sec, name):
    if sec.get(name) is not None:
        g = np.asarray(sec[name], dtype=float)
        if g.ndim != 1 or g.size == 0:
            raise ConfigError(f"smoothing.{name} must be a nonempty list")
        return g
    g = sec.get("grid")
    if g:
        return 10.0 ** np.arange(float(g.get("log10_start", 0)),
                                 float(g.get("log10_stop", 12)) + 1e-9,
                                 float(g.get("log10_step", 0.5)))
    return DEFAULT_GRID


def sarimax_spec(cfg, name, default):
    sec = _section(_section(cfg, "sarimax"), name) if cfg.get("sarimax") else {}
    if not sec:
        return default
    d = default.to_dict()
    d.update(sec)
    try:
        return SarimaxSpec.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sarimax.{name}: {exc}") from exc


# ---------------------------------------------------------------------------
# data plumbing

def load_inputs(cfg, base, years=None):
    paths = data_paths(cfg, base)
    idx = _section(cfg, "index")
    panel, covs, graph, pop, report = load_csv_inputs(
        {k: str(v) for k, v in paths.items()}, years, idx.get("ages"), idx.get("regions"))
    errors = report.errors()
    if errors:
        raise DataError("validation failed:\n" + "\n".join(f"{i.code}: {i.message}"
                                                            for i in errors[:20]))
    for issue in report:
        log.warning("%s: %s", issue.code, issue.message)
    return panel, covs, graph, pop, report


def build_design(cfg, covs):
    sec = _section(cfg, "dlnm")
    t = _section(sec, "temperature")
    i = _section(sec, "ili")
    R = covs.tavg.shape[-1]
    temp = None
    if t.get("enabled", True):
        temp = tuple(temperature_spec(covs.tavg[..., r], int(t.get("max_lag", 4)),
                                      tuple(t.get("knot_percentiles", (0.10, 0.90))),
                                      tuple(t.get("lag_knots", (0.5, 1.5))))
                     for r in range(R))
    ili = thr = None
    if i.get("enabled", True):
        ili = ili_spec(int(i.get("max_lag", 6)), tuple(i.get("lag_knots", (0.5, 1.5))))
        thr = np.quantile(covs.ili, float(i.get("threshold_quantile", 0.9)), axis=0,
                          method="linear")
    return DesignSpec(temp, ili, thr)


def model_data(panel, covs, design):
    Z1, Z2 = design_matrices(design, covs.tavg, covs.ili)
    return ModelData.from_panel(panel, Z1, Z2)


def _meta(panel, design):
    return {"design": design.to_dict(), "ages": list(panel.index.ages),
            "regions": list(panel.index.regions), "years": list(panel.index.years)}


def write_manifest(out):
    out = Path(out)
    lines = []
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.txt":
            digest = hashlib.sha256(p.read_bytes()).hexdigest()
            lines.append(f"{digest}  {p.relative_to(out).as_posix()}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return lines


def _fit_path(args):
    return Path(args.fit) if getattr(args, "fit", None) else Path(args.out) / "fit.json"


def _load_fit(args):
    p = _fit_path(args)
    if not p.is_file():
        raise ConfigError(f"fit file {p} not found; run `fit` or `select` first")
    return FitResult.load(p)


def _write_fit(res, data, out, name="fit"):
    res.save(out / f"{name}.json", out / f"{name}_cov.npy")
    g = fit_pearson(res, data)
    summary = {k: v for k, v in g.items() if k != "rho2"}
    summary["below_threshold"] = bool(summary.get("below_threshold", False))
    (out / f"{name}_pearson.json").write_text(json.dumps(summary, indent=1))
    log.info("edf %.2f, AIC %.2f, aggregate rho^2 %.1f (threshold %.1f)", res.edf, res.aic,
             g["aggregate"], g.get("threshold", np.nan))
    return EXIT_OK if res.converged else EXIT_CONVERGENCE


# ---------------------------------------------------------------------------
# subcommands

def cmd_ingest(args, cfg, base, out):
    panel, covs, graph, pop, report = load_inputs(cfg, base, calibration_years(cfg))
    np.save(out / "deaths.npy", panel.deaths)
    np.save(out / "exposures.npy", panel.exposures)
    np.save(out / "tavg.npy", covs.tavg)
    np.save(out / "ili.npy", covs.ili)
    index = {"ages": list(panel.index.ages), "years": list(panel.index.years),
             "regions": list(panel.index.regions), "edges": [list(e) for e in graph.edges()]}
    (out / "panel_index.json").write_text(json.dumps(index, indent=1))
    (out / "validation.txt").write_text(report.summary(limit=len(report)) + "\n")
    return EXIT_OK


def _penalty(cfg, graph, args):
    sec = _section(cfg, "smoothing")
    psi1 = args.psi1 if args.psi1 is not None else float(sec.get("psi1", 0.0))
    psi2 = args.psi2 if args.psi2 is not None else float(sec.get("psi2", 0.0))
    return PenaltyConfig(psi1, psi2, build_laplacian(graph))


def cmd_fit(args, cfg, base, out):
    panel, covs, graph, *_ = load_inputs(cfg, base, calibration_years(cfg))
    design = build_design(cfg, covs)
    data = model_data(panel, covs, design)
    pen = _penalty(cfg, graph, args)
    res = fit_model(data, pen, fit_config(cfg), meta=_meta(panel, design))
    return _write_fit(res, data, out)


def cmd_select(args, cfg, base, out):
    panel, covs, graph, *_ = load_inputs(cfg, base, calibration_years(cfg))
    design = build_design(cfg, covs)
    data = model_data(panel, covs, design)
    sec = _section(cfg, "smoothing")
    pen = PenaltyConfig(0.0, 0.0, build_laplacian(graph))
    p1, p2, res, table = select_smoothing(data, pen, _grid(sec, "grid1"), _grid(sec, "grid2"),
                                          fit_config(cfg), meta=_meta(panel, design))
    pd.DataFrame(table, columns=["psi1", "psi2", "aic", "edf", "loglik_pen"]).to_csv(
        out / "aic_table.csv", index=False)
    (out / "selection.json").write_text(json.dumps({"psi1": p1, "psi2": p2, "aic": res.aic},
                                                   indent=1))
    log.info("selected psi1=%g psi2=%g", p1, p2)
    return _write_fit(res, data, out)


def cmd_rr(args, cfg, base, out):
    fit = _load_fit(args)
    design = DesignSpec.from_dict(fit.meta["design"])
    years = tuple(fit.meta["years"])
    _, covs, *_ = load_inputs(cfg, base, years)
    sec = _section(cfg, "rr")
    n_grid = int(sec.get("n_grid", 100))
    lag_step = float(sec.get("lag_step", 0.25))
    pct = float(sec.get("lag_percentile", 99.5))
    ages, regions = fit.meta["ages"], fit.meta["regions"]
    series = {"temp": covs.tavg, "ili": design.ili_anomaly(covs.ili) if design.ili else None}
    overall, by_lag, surface = [], [], []
    for channel, spec_ok in (("temp", design.temp is not None), ("ili", design.ili is not None)):
        if not spec_ok:
            continue
        for r in range(len(regions)):
            v = series[channel][..., r]
            grid = np.linspace(v.min(), v.max(), n_grid)
            xi_hi = float(np.percentile(v, pct))
            spec = design.temp[r] if channel == "temp" else design.ili
            lags = np.arange(0.0, spec.max_lag + 1e-9, lag_step)
            for x in range(len(ages)):
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    overall.append(rr_overall(fit, channel, x, r, grid, design=design))
                    by_lag.append(rr_by_lag(fit, channel, x, r, xi_hi, design=design))
                    surface.append(rr_surface(fit, channel, x, r, grid[:: max(1, n_grid // 50)],
                                              lags, design=design))
    for name, curves in (("rr_overall", overall), ("rr_lag", by_lag), ("rr_surface", surface)):
        curves_frame(curves, ages, regions).to_csv(out / f"{name}.csv", index=False)
    return EXIT_OK


def _horizon_years(start, horizon):
    return tuple(range(start, start + -(-horizon // N_WEEKS)))


def _future_exposure(cfg, base, mode_setting, start, horizon):
    if mode_setting == "hold":
        return None
    paths = data_paths(cfg, base)
    idx = _section(cfg, "index")
    pop = read_population(paths["population"], idx.get("ages"), idx.get("regions"))
    years = _horizon_years(start, horizon)
    if years[-1] + 1 in pop.years:
        return interpolate_exposure(pop, years)
    if mode_setting == "observed":
        raise ConfigError(f"population does not cover forecast years {years[0]}..{years[-1] + 1}")
    return None


def cmd_forecast(args, cfg, base, out):
    mode = args.mode or "model4"
    if mode not in MODES:
        raise ConfigError(f"--mode must be one of {MODES}")
    sec = _section(cfg, "forecast")
    hold = holdout_years(cfg)
    horizon = args.horizon or sec.get("horizon") or (len(hold) * N_WEEKS if hold else N_WEEKS)
    n_sims = args.nsims or int(sec.get("n_sims", 1000))
    seed = _seed(args, cfg)
    cal = calibration_years(cfg)
    fit = None
    if mode in ("model4", "model5"):
        fit = _load_fit(args)
        cal = tuple(fit.meta["years"])
    panel, covs, *_ = load_inputs(cfg, base, cal)
    start = panel.index.years[-1] + 1
    E_future = _future_exposure(cfg, base, sec.get("exposures", "auto"), start, horizon)
    observed = drivers = None
    if mode == "model5":
        years = _horizon_years(start, horizon)
        if args.covariates:
            observed = read_covariates(args.covariates, years, panel.index.regions)
        else:
            _, observed, *_ = load_inputs(cfg, base, years)
    if mode == "model4":
        cop = _section(cfg, "copula")
        drivers = fit_drivers(covs.flat("tavg"), covs.flat("ili"), fit.theta.kappa,
                              sarimax_spec(cfg, "temperature", TEMP_SPEC),
                              sarimax_spec(cfg, "ili", ILI_SPEC),
                              sarimax_spec(cfg, "kappa", KAPPA_SPEC),
                              cop.get("temperature", "student-t"), cop.get("ili", "student-t"),
                              cop.get("kappa", "gaussian"))
        drivers.summary().to_csv(out / "driver_models.csv", index=False)
    fs = forecast_model(mode, horizon, n_sims, seed, panel, fit, covs, observed, drivers,
                        E_future, fit_config(cfg))
    fs.frame(panel.index.ages, panel.index.regions).to_csv(out / f"forecast_{mode}.csv",
                                                           index=False)
    fs.save(out / f"forecast_{mode}")
    if args.dump_paths and drivers is not None:
        paths = simulate_joint(drivers, horizon, n_sims, seed)
        paths_frame(paths, panel.index.regions).to_csv(out / "driver_paths.csv", index=False)
    return EXIT_OK


def cmd_evaluate(args, cfg, base, out):
    frames = []
    modes = [args.mode] if args.mode else list(MODES)
    found = [m for m in modes if (out / f"forecast_{m}.json").is_file()]
    fit_file = _fit_path(args)
    if not found and not fit_file.is_file():
        raise ConfigError("nothing to evaluate: no forecast or fit artifacts in the output "
                          "directory")
    if found:
        first = ForecastSet.load(out / f"forecast_{found[0]}")
        years = _horizon_years(first.start_year, first.horizon)
        holdout, *_ = load_inputs(cfg, base, years)
        for m in found:
            fs = ForecastSet.load(out / f"forecast_{m}")
            H = fs.horizon
            obs = holdout.deaths.reshape(holdout.deaths.shape[0], -1,
                                         holdout.deaths.shape[3])[:, :H]
            frames.append(scores_frame(m, obs, fs, holdout.index.ages))
        scores = pd.concat(frames, ignore_index=True)
        scores.to_csv(out / "scores.csv", index=False)
        ref = _section(cfg, "reference")
        if ref.get("scores"):
            p = Path(ref["scores"])
            check = compare_scores(scores, pd.read_csv(p if p.is_absolute() else base / p),
                                   float(ref.get("rtol", 0.05)))
            check.to_csv(out / "reference_check.csv", index=False)
            log.info("%d of %d scores within %.0f%% of the reference", int(check.within.sum()),
                     len(check), 100 * float(ref.get("rtol", 0.05)))
    if fit_file.is_file():
        fit = FitResult.load(fit_file)
        design = DesignSpec.from_dict(fit.meta["design"])
        panel, covs, *_ = load_inputs(cfg, base, tuple(fit.meta["years"]))
        g = fit_pearson(fit, model_data(panel, covs, design))
        rows = [("fit", "overall", k, float(g[k]))
                for k in ("aggregate", "threshold", "exceed_fraction", "dof")]
        pd.DataFrame(rows, columns=["model", "age_group", "metric", "value"]).to_csv(
            out / "pearson.csv", index=False)
    return EXIT_OK


def cmd_synth(args, cfg, base, out):
    sec = dict(_section(cfg, "synth"))
    seed = _seed(args, cfg, sec.pop("seed", None))
    holdout = int(sec.pop("holdout_years", 3))
    known = {f.name for f in fields(SynthConfig)}
    unknown = set(sec) - known
    if unknown:
        raise ConfigError(f"unknown synth keys {sorted(unknown)}")
    if "alpha_range" in sec:
        sec["alpha_range"] = tuple(sec["alpha_range"])
    try:
        scfg = SynthConfig(**sec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synth: {exc}") from exc
    data = generate(scfg, seed)
    paths = write_csv_inputs(data, out / "data")
    years = data.panel.index.years
    if holdout >= len(years):
        raise ConfigError("synth.holdout_years must be smaller than n_years")
    n_cal = len(years) - holdout
    config = {
        "data": {k: f"data/{Path(p).name}" for k, p in paths.items()},
        "index": {"calibration": [years[0], years[n_cal - 1]]},
        "smoothing": {"psi1": 0.0, "psi2": 0.0, "grid1": [1.0, 1e3], "grid2": [1.0, 1e3]},
        "forecast": {"horizon": holdout * N_WEEKS if holdout else N_WEEKS, "n_sims": 500},
        "seed": int(seed),
    }
    if holdout:
        config["index"]["holdout"] = [years[n_cal], years[-1]]
    (out / "config.yaml").write_text(yaml.safe_dump(config, sort_keys=False))
    truth = {"params": data.theta.to_dict(), "config": asdict(scfg), "seed": int(seed)}
    (out / "truth.json").write_text(json.dumps(truth, indent=1))
    return EXIT_OK


COMMANDS = {"ingest": cmd_ingest, "fit": cmd_fit, "select": cmd_select, "rr": cmd_rr,
            "forecast": cmd_forecast, "evaluate": cmd_evaluate, "synth": cmd_synth}


def _seed(args, cfg, fallback=None):
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    if fallback is not None:
        return int(fallback)
    return int(cfg.get("seed", 0))


def build_parser():
    p = argparse.ArgumentParser(prog="weeklymort", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="YAML configuration file")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--seed", type=int, help="root seed (overrides config)")
    p.add_argument("--threads", type=int, help="cap on BLAS/worker threads")
    p.add_argument("--mode", help=f"forecast structure, one of {', '.join(MODES)}")
    p.add_argument("--psi1", type=float, help="temperature smoothing weight")
    p.add_argument("--psi2", type=float, help="ILI smoothing weight")
    p.add_argument("--horizon", type=int, help="forecast horizon in weeks")
    p.add_argument("--nsims", type=int, help="number of simulated paths")
    p.add_argument("--covariates", help="observed covariates CSV for model5")
    p.add_argument("--fit", help="fit report (default: <out>/fit.json)")
    p.add_argument("--dump-paths", action="store_true", help="also write simulated driver paths")
    p.add_argument("--log-level", default="INFO")
    return p


def run(args):
    out = Path(args.out)
    try:
        cfg, base = load_config(args.config)
        if args.command != "synth" and not args.config:
            raise ConfigError(f"`{args.command}` needs --config")
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=args.threads):
            code = COMMANDS[args.command](args, cfg, base, out)
    except (ConfigError, KeyError, yaml.YAMLError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, SchemaError) as exc:
        log.error("data validation failed: %s", exc)
        return EXIT_DATA
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except ValueError as exc:
        log.error("invalid setting: %s", exc)
        return EXIT_CONFIG
    if code == EXIT_CONVERGENCE:
        log.error("fit did not converge; artifacts written with converged=false")
    write_manifest(out)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
