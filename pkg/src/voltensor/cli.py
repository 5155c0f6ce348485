"""Batch driver chaining the pipeline stages behind one command-line tool.

Each run reads a single JSON configuration document with one section per
subcommand plus a master seed and an output directory.  The document is
validated up front: unknown keys anywhere are rejected, values are type
checked, and defaults are filled in, so every run starts from a fully
resolved configuration that is also written back to the output directory
for audit and byte-identical replays.

Stages communicate through files laid out under the output directory:
simulate writes a study (panels, truth, covariates, manifest), estimate
turns panels into a daily volatility tensor, fit trains the factor model,
predict emits the next-day matrix, evaluate scores it, and backtest runs a
rolling-window comparison with minimum-variance portfolios.  Any stage
failure exits nonzero with a stage-tagged diagnostic on stderr; partial
backtest results are flushed before aborting.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from voltensor import evaluation, market_sim, portfolio, ptpoet, study
from voltensor.market_sim import SimConfig
from voltensor.realized_vol import (
    PrvmConfig,
    previous_tick_sync,
    prvm,
    read_panel_csv,
    read_tick_csv,
)
from voltensor.tensor_core import VolTensor

PIPELINE_WINDOWS = (63, 126, 252)
KNOWN_METHODS = ("prvm", "poet", "tpoet", "ptpoet", "fivar", "fivar_h")

_NUM = (int, float)

# section -> {key: (allowed types, default)}; None defaults are resolved at
# run time (path conventions, estimator metadata) or stay optional
_SECTION_SCHEMAS = {
    "simulate": {
        "p": (int, 50),
        "D": (int, 100),
        "m": (int, 2000),
        "r1": (int, 3),
        "r2": (int, 1),
        "har_params": (list, list(market_sim.PAPER_HAR_PARAMS)),
        "jump_intensity": (_NUM, 5.0),
        "jump_size_scale": (_NUM, 0.05),
        "noise_scale": (_NUM, 0.01),
        "gamma_shape": (_NUM, 100.0),
        "gamma_rate": (_NUM, 100.0),
        "sparse_prob_scale": (_NUM, 0.3),
        "burn_in_days": (int, 105),
    },
    "estimate": {
        "source": (str, "panels"),
        "data_dir": (str, None),
        "tick_files": (list, None),
        "grid_seconds": (_NUM, 60.0),
        "K": (int, None),
        "weight": (str, "minx"),
        "trunc_multiplier": (_NUM, 7.0),
        "trunc_exponent": (_NUM, 0.235),
        "series_rank": (int, 3),
    },
    "fit": {
        "tensor": (str, None),
        "covariates": (str, None),
        "r1": (int, 3),
        "r2": (int, 1),
        "tau": (_NUM, None),
        "thresh_rule": (str, "soft"),
        "projected": (bool, True),
        "sieve_degree": (int, 2),
        "sieve_basis": (str, "additive-polynomial"),
    },
    "predict": {
        "model": (str, None),
        "covariates": (str, None),
        "psd_floor": (bool, False),
    },
    "evaluate": {
        "prediction": (str, None),
        "truth": (str, None),
    },
    "backtest": {
        "window": (int, 63),
        "n_out": (int, 20),
        "methods": (list, list(study.COMPARISON_METHODS)),
        "c_grid": (list, list(portfolio.DEFAULT_C_GRID)),
        "ret_interval_minutes": (_NUM, 10.0),
        "n_jobs": (int, 1),
    },
}


class ConfigError(ValueError):
    """Configuration document rejected before any computation."""


def _check_type(section: str, key: str, value, kinds) -> None:
    if not isinstance(kinds, tuple):
        kinds = (kinds,)
    # bool is an int subclass; only accept it where bool is named
    if isinstance(value, bool) and bool not in kinds:
        raise ConfigError(f"{section}.{key}: expected {kinds[0].__name__}, got bool")
    if not isinstance(value, kinds):
        names = "/".join(k.__name__ for k in kinds)
        raise ConfigError(
            f"{section}.{key}: expected {names}, got {type(value).__name__}"
        )


def validate_config(doc: dict) -> dict:
    """Validate a raw configuration document and fill in defaults.

    Unknown keys at any level are rejected; values are type checked.  The
    returned dict has every section present with every key resolved.
    """
    if not isinstance(doc, dict):
        raise ConfigError(f"config root must be an object, got {type(doc).__name__}")
    known_top = {"seed", "out_dir", *_SECTION_SCHEMAS}
    unknown = sorted(set(doc) - known_top)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")

    resolved: dict = {"seed": doc.get("seed"), "out_dir": doc.get("out_dir")}
    if resolved["seed"] is not None:
        _check_type("top-level", "seed", resolved["seed"], int)
    if resolved["out_dir"] is not None:
        _check_type("top-level", "out_dir", resolved["out_dir"], str)

    for section, schema in _SECTION_SCHEMAS.items():
        given = doc.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"{section}: expected an object")
        unknown = sorted(set(given) - set(schema))
        if unknown:
            raise ConfigError(f"unknown keys in {section}: {', '.join(unknown)}")
        block = {}
        for key, (kinds, default) in schema.items():
            value = given.get(key, default)
            if value is not None:
                _check_type(section, key, value, kinds)
            block[key] = value
        resolved[section] = block
    return resolved


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return validate_config(doc)


def write_run_config(cfg: dict, out_dir: Path) -> None:
    with open(out_dir / "run_config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# stages


def cmd_simulate(cfg: dict) -> Path:
    """Simulate a study and lay it out under <out>/sim."""
    sec = cfg["simulate"]
    sim_cfg = SimConfig(
        p=sec["p"],
        D=sec["D"],
        m=sec["m"],
        r1=sec["r1"],
        r2=sec["r2"],
        har_params=tuple(sec["har_params"]),
        jump_intensity=sec["jump_intensity"],
        jump_size_scale=sec["jump_size_scale"],
        noise_scale=sec["noise_scale"],
        gamma_shape=sec["gamma_shape"],
        gamma_rate=sec["gamma_rate"],
        sparse_prob_scale=sec["sparse_prob_scale"],
        seed=cfg["seed"],
        burn_in_days=sec["burn_in_days"],
    )
    out = Path(cfg["out_dir"]) / "sim"
    sim = market_sim.simulate_study(sim_cfg)
    market_sim.write_study_dir(out, sim, sim_cfg)
    return out


def _read_sim_panels(data_dir: Path) -> list:
    files = sorted(Path(data_dir).glob("panel_[0-9]*.csv"))
    if not files:
        raise FileNotFoundError(f"no panel_<digits>.csv files in {data_dir}")
    return [read_panel_csv(f, day_index=i) for i, f in enumerate(files)]


def _read_tick_panels(tick_files, grid_seconds: float) -> list:
    panels = []
    for i, path in enumerate(tick_files):
        names, ticks = read_tick_csv(path)
        start = max(float(t[0]) for t, _ in ticks)
        stop = min(float(t[-1]) for t, _ in ticks)
        grid = np.arange(start, stop + 1e-9, float(grid_seconds))
        if grid.size < 2:
            raise ValueError(
                f"{path}: common tick span [{start}, {stop}] holds fewer than "
                f"two grid points at {grid_seconds}s"
            )
        panels.append(previous_tick_sync(ticks, grid, day_index=i, asset_names=names))
    return panels


def cmd_estimate(cfg: dict) -> Path:
    """Estimate daily volatility matrices and write the stacked tensor.

    Panels come either from a directory of per-day CSVs (the simulate
    layout) or from per-day tick CSVs synchronized by previous-tick
    interpolation onto a regular grid.  Alongside the tensor this writes
    the estimator metadata and, when enough days are available, the
    covariate file used by the projected fit.
    """
    sec = cfg["estimate"]
    out = Path(cfg["out_dir"])
    prvm_cfg = PrvmConfig(
        K=sec["K"],
        weight=sec["weight"],
        trunc_multiplier=sec["trunc_multiplier"],
        trunc_exponent=sec["trunc_exponent"],
    )
    if sec["source"] == "panels":
        data_dir = Path(sec["data_dir"]) if sec["data_dir"] else out / "sim" / "panels"
        panels = _read_sim_panels(data_dir)
    elif sec["source"] == "ticks":
        if not sec["tick_files"]:
            raise ConfigError("estimate.tick_files required when source is 'ticks'")
        panels = _read_tick_panels(sec["tick_files"], sec["grid_seconds"])
    else:
        raise ConfigError(
            f"estimate.source must be 'panels' or 'ticks', got {sec['source']!r}"
        )

    est = [prvm(panel, prvm_cfg) for panel in panels]
    tensor = VolTensor.from_slices(est)
    tensor.save(out / "realized")

    k = min(sec["series_rank"], tensor.p)
    series = np.array([np.linalg.eigvalsh(g)[-k:].mean() for g in est])
    warmup = market_sim.COVARIATE_WARMUP
    if series.size > warmup:
        x_all, x_next = ptpoet.har_covariates(series)
        _write_covariates(out / "covariates.csv", x_all, x_next,
                          first_day=series.size - x_all.shape[0])
    else:
        warnings.warn(
            f"only {series.size} days estimated; at least {warmup + 1} are "
            "needed to build covariates, skipping covariates.csv",
            RuntimeWarning,
        )

    meta = {
        "m": int(min(panel.m for panel in panels)),
        "n_days": len(panels),
        "p": int(tensor.p),
        "series_rank": int(k),
        "source": sec["source"],
        "prvm": {
            "K": prvm_cfg.K,
            "weight": prvm_cfg.weight,
            "trunc_multiplier": prvm_cfg.trunc_multiplier,
            "trunc_exponent": prvm_cfg.trunc_exponent,
        },
    }
    with open(out / "estimate_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out / "realized"


def _write_covariates(path, x_all: np.ndarray, x_next: np.ndarray,
                      first_day: int) -> None:
    """Covariate CSV: one row per fit day, then the target day's row last."""
    rows = np.vstack([x_all, np.asarray(x_next, dtype=float)[None, :]])
    days = [*range(first_day, first_day + x_all.shape[0]),
            first_day + x_all.shape[0]]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["day", "x_daily", "x_weekly", "x_monthly"])
        for day, row in zip(days, rows):
            writer.writerow([day, *(f"{v:.17g}" for v in row)])


def _read_covariates(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (fit days, fit covariate rows, target day covariates)."""
    with open(path, encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[0] != "day":
            raise ValueError(f"{path}: first column must be 'day'")
        days, rows = [], []
        for record in reader:
            days.append(int(float(record[0])))
            rows.append([float(v) for v in record[1:]])
    if len(rows) < 2:
        raise ValueError(f"{path}: need at least one fit row plus the target row")
    return np.asarray(days[:-1]), np.asarray(rows[:-1]), np.asarray(rows[-1])


def _resolve_covariates_path(cfg: dict, override) -> Path:
    if override:
        return Path(override)
    out = Path(cfg["out_dir"])
    for candidate in (out / "sim" / "covariates.csv", out / "covariates.csv"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(
        f"no covariates.csv under {out} (looked in sim/ and the root); "
        "run simulate or estimate first, or set the path in the config"
    )


def cmd_fit(cfg: dict) -> Path:
    sec = cfg["fit"]
    out = Path(cfg["out_dir"])
    tensor_prefix = Path(sec["tensor"]) if sec["tensor"] else out / "realized"
    tensor = VolTensor.load(tensor_prefix)

    tau = sec["tau"]
    if tau is None:
        meta_path = tensor_prefix.parent / "estimate_manifest.json"
        if not meta_path.exists():
            raise ConfigError(
                "fit.tau not set and no estimate_manifest.json next to the "
                "tensor to derive it from; set fit.tau explicitly"
            )
        with open(meta_path, encoding="utf-8") as fh:
            tau = ptpoet.default_tau(tensor.p, json.load(fh)["m"])

    x_next = None
    if sec["projected"]:
        cov_path = _resolve_covariates_path(cfg, sec["covariates"])
        days, x_all, x_next = _read_covariates(cov_path)
        if days.size and days[-1] >= tensor.n_days:
            raise ValueError(
                f"covariate rows reference day {days[-1]} but the tensor has "
                f"only {tensor.n_days} days"
            )
        y_fit = tensor.values[:, :, days]
        sieve = ptpoet.build_sieve(x_all, sec["sieve_degree"], sec["sieve_basis"])
    else:
        y_fit = tensor.values
        sieve = None

    model = ptpoet.fit(y_fit, sieve, sec["r1"], sec["r2"], tau, sec["thresh_rule"])
    ptpoet.save_model(model, out / "model")
    manifest = {
        "tau": float(tau),
        "r1": sec["r1"],
        "r2": sec["r2"],
        "projected": sec["projected"],
        "thresh_rule": sec["thresh_rule"],
        "n_fit_days": int(y_fit.shape[2]),
        "x_next": None if x_next is None else [float(v) for v in x_next],
    }
    with open(out / "fit_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out / "model"


def cmd_predict(cfg: dict) -> Path:
    sec = cfg["predict"]
    out = Path(cfg["out_dir"])
    model = ptpoet.load_model(Path(sec["model"]) if sec["model"] else out / "model")

    x_next = None
    if model.sieve is not None:
        if sec["covariates"]:
            _, _, x_next = _read_covariates(Path(sec["covariates"]))
        else:
            manifest_path = out / "fit_manifest.json"
            if manifest_path.exists():
                with open(manifest_path, encoding="utf-8") as fh:
                    stored = json.load(fh).get("x_next")
                x_next = None if stored is None else np.asarray(stored)
            if x_next is None:
                _, _, x_next = _read_covariates(_resolve_covariates_path(cfg, None))

    pred = ptpoet.predict(model, x_next, psd_floor=sec["psd_floor"])
    path = out / "prediction.csv"
    np.savetxt(path, pred, delimiter=",", fmt="%.17g")
    return path


def cmd_evaluate(cfg: dict) -> Path:
    sec = cfg["evaluate"]
    out = Path(cfg["out_dir"])
    pred_path = Path(sec["prediction"]) if sec["prediction"] else out / "prediction.csv"
    truth_path = Path(sec["truth"]) if sec["truth"] else out / "sim" / "next_day_truth.csv"
    pred = np.loadtxt(pred_path, delimiter=",")
    truth = np.loadtxt(truth_path, delimiter=",")

    errors = evaluation.norm_errors(pred, truth)
    records = []
    for metric, value in errors.items():
        if isinstance(value, float):
            records.append(
                {"method": "model", "period": "next-day", "metric": metric,
                 "value": value}
            )
    reason = errors.get("relative_frobenius_reason")
    if reason:
        warnings.warn(f"relative norm unavailable: {reason}", RuntimeWarning)
    evaluation.write_results_table(
        records, out / "eval_norms.csv", out / "eval_norms.json"
    )
    return out / "eval_norms.csv"


def _backtest_day(est: list, series: np.ndarray, tgt: int, window: int,
                  sim_sec: dict, tau: float, want_eigen_ar: bool) -> dict:
    y = np.stack(est[tgt - window : tgt], axis=2)
    x_all, x_next = ptpoet.har_covariates(series[:tgt])
    return study.method_predictions(
        y, x_all[-window:], x_next, sim_sec["r1"], sim_sec["r2"], tau,
        include_eigen_ar=want_eigen_ar,
    )


def cmd_backtest(cfg: dict) -> Path:
    """Rolling-window method comparison with portfolio risk scoring.

    Simulates one stretch of days, fits every requested method on each
    rolling in-sample window, predicts the next day, and scores both the
    matrix prediction error against the conditional truth and the realized
    risk of the minimum-variance portfolios across the exposure grid.
    Per-day results are flushed even when a later day fails.
    """
    sec = cfg["backtest"]
    sim_sec = cfg["simulate"]
    window, n_out = sec["window"], sec["n_out"]
    if window not in PIPELINE_WINDOWS:
        raise ConfigError(f"backtest.window must be one of {PIPELINE_WINDOWS}")
    if n_out < 1:
        raise ConfigError("backtest.n_out must be at least 1")
    methods = [str(name).lower() for name in sec["methods"]]
    unknown = sorted(set(methods) - set(KNOWN_METHODS))
    if unknown:
        raise ConfigError(
            f"unknown backtest methods: {', '.join(unknown)} "
            f"(known: {', '.join(KNOWN_METHODS)})"
        )
    for c in sec["c_grid"]:
        if not isinstance(c, _NUM) or c < 1:
            raise ConfigError(f"backtest.c_grid entries must be numbers >= 1, got {c!r}")

    out = Path(cfg["out_dir"]) / "backtest"
    out.mkdir(parents=True, exist_ok=True)
    sim_cfg = SimConfig(
        p=sim_sec["p"], D=window, m=sim_sec["m"], r1=sim_sec["r1"],
        r2=sim_sec["r2"], har_params=tuple(sim_sec["har_params"]),
        jump_intensity=sim_sec["jump_intensity"],
        jump_size_scale=sim_sec["jump_size_scale"],
        noise_scale=sim_sec["noise_scale"], gamma_shape=sim_sec["gamma_shape"],
        gamma_rate=sim_sec["gamma_rate"],
        sparse_prob_scale=sim_sec["sparse_prob_scale"], seed=cfg["seed"],
    )
    warm = market_sim.COVARIATE_WARMUP
    n_days = warm + window + n_out
    truth, panels = market_sim.simulate_paths(sim_cfg, n_days)
    est = [prvm(panel) for panel in panels]
    series = np.array([np.linalg.eigvalsh(g)[-sim_cfg.r1 :].mean() for g in est])
    tau = ptpoet.default_tau(sim_cfg.p, sim_cfg.m)
    want_eigen_ar = any(name.startswith("fivar") for name in methods)

    norm_rows: list[list] = []
    day_preds: list[dict] = []
    failure: Exception | None = None
    targets = list(range(warm + window, n_days))
    pool = ThreadPoolExecutor(max_workers=sec["n_jobs"]) if sec["n_jobs"] > 1 else None
    try:
        if pool is not None:
            providers = [
                pool.submit(_backtest_day, est, series, tgt, window,
                            sim_sec, tau, want_eigen_ar).result
                for tgt in targets
            ]
        else:
            providers = [
                (lambda tgt=tgt: _backtest_day(est, series, tgt, window,
                                               sim_sec, tau, want_eigen_ar))
                for tgt in targets
            ]
        # consume in day order, scoring each day as it lands so earlier
        # days survive a mid-run failure
        for t, (tgt, provider) in enumerate(zip(targets, providers)):
            preds = provider()
            target = truth.conditional_gamma_slice(tgt)
            kept = {name: preds[name] for name in methods}
            day_preds.append(kept)
            for name in methods:
                errs = evaluation.norm_errors(kept[name], target)
                for norm in study.NORMS:
                    value = errs[norm]
                    if value is not None:
                        norm_rows.append([t, name, norm, value])
    except Exception as exc:  # flush what finished, then surface the failure
        failure = exc
    finally:
        if pool is not None:
            pool.shutdown(wait=False, cancel_futures=True)

    with open(out / "norm_errors.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["day", "method", "norm", "value"])
        for day, name, norm, value in norm_rows:
            writer.writerow([day, name, norm, f"{value:.17g}"])

    if failure is not None:
        raise failure

    predictions = {name: [daily[name] for daily in day_preds] for name in methods}
    out_panels = panels[warm + window :]
    risk_rows = portfolio.backtest(
        predictions, out_panels, tuple(sec["c_grid"]), sec["ret_interval_minutes"]
    )
    portfolio.write_risk_table(risk_rows, out / "risk_table.csv",
                               period=f"window-{window}")

    if len(methods) > 1 and n_out >= 10:
        losses = {
            name: np.array([
                value for day, method, norm, value in norm_rows
                if method == name and norm == "frobenius"
            ])
            for name in methods
        }
        p_matrix = np.ones((len(methods), len(methods)))
        for i, a in enumerate(methods):
            for j, b in enumerate(methods):
                if i != j:
                    p_matrix[i, j] = evaluation.dm_test(losses[a], losses[b])["p_value"]
        evaluation.write_dm_matrix(methods, p_matrix, out / "dm_frobenius.csv")
    return out


# ---------------------------------------------------------------------------
# entry point

COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "backtest": cmd_backtest,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="voltensor",
        description="Predict large intraday volatility matrices with a "
        "projected tensor factor model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "simulate a study and write panels, truth, and covariates",
        "estimate": "estimate daily volatility matrices from panels or ticks",
        "fit": "fit the factor model to an estimated tensor",
        "predict": "predict the next-day volatility matrix from a fitted model",
        "evaluate": "score a prediction against a truth matrix",
        "backtest": "rolling-window method comparison with portfolio risk",
    }
    for name in COMMANDS:
        cmd = sub.add_parser(name, help=helps[name])
        cmd.add_argument("--config", required=True, help="path to the JSON config")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override the config's master seed")
        cmd.add_argument("--out", default=None,
                         help="override the config's output directory")
    args = parser.parse_args(argv)

    stage = "config"
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.out is not None:
            cfg["out_dir"] = args.out
        if cfg["seed"] is None:
            raise ConfigError("no seed: set \"seed\" in the config or pass --seed")
        if cfg["out_dir"] is None:
            raise ConfigError("no output directory: set \"out_dir\" or pass --out")
        out_dir = Path(cfg["out_dir"])
        out_dir.mkdir(parents=True, exist_ok=True)
        write_run_config(cfg, out_dir)
        stage = args.command
        COMMANDS[args.command](cfg)
    except Exception as exc:
        print(f"[{stage}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
