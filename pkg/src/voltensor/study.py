"""Monte-Carlo comparison of one-day-ahead volatility matrix predictors.

One simulation per seed produces a stretch of days at the finest intraday
resolution; coarser sampling frequencies reuse the same price paths through
subsampling, and every (window length, frequency) cell scores the same
rolling block of target days.  The target on each day is the conditional
expected volatility matrix given the loading history, which is what the
factor predictors model.

All methods share the day-D thresholded idiosyncratic estimate, so the
comparison isolates how well each models the factor dynamics: the raw
estimator carries the last day forward, the spectral-truncation baseline
freezes the last day's factor structure, and the tensor methods (with and
without the covariate projection) extrapolate the loading path.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from voltensor import baselines, evaluation, market_sim, ptpoet
from voltensor.realized_vol import prvm

COMPARISON_METHODS = ("prvm", "poet", "tpoet", "ptpoet")
NORMS = ("frobenius", "max", "spectral", "relative_frobenius")


@dataclass(frozen=True)
class StudyDesign:
    """Grid and model settings for one comparison study."""

    p: int = 50
    d_grid: tuple[int, ...] = (50, 100)
    m_grid: tuple[int, ...] = (250, 2000)
    n_targets: int = 20
    r1: int = 3
    r2: int = 1
    sieve_degree: int = 2

    def __post_init__(self):
        if self.n_targets < 1:
            raise ValueError("n_targets must be at least 1")
        base = max(self.m_grid)
        for m in self.m_grid:
            if base % m != 0:
                raise ValueError(f"m={m} must divide the finest grid value {base}")
        if min(self.d_grid) < market_sim.COVARIATE_WARMUP + 2:
            raise ValueError("window lengths must exceed the covariate warmup")


def _truncate_top(mat: np.ndarray, r1: int) -> np.ndarray:
    w, v = np.linalg.eigh(mat)
    return (v[:, -r1:] * w[-r1:]) @ v[:, -r1:].T


def method_predictions(y: np.ndarray, x_window: np.ndarray, x_next: np.ndarray,
                       r1: int, r2: int, tau: float, sieve_degree: int = 2,
                       include_eigen_ar: bool = False) -> dict:
    """One-day-ahead predictions from every comparison method.

    y is the (p, p, D) estimated tensor for the fit window, x_window the
    matching D rows of covariates, x_next the target day's covariates.  The
    factor methods all add the same thresholded last-day residual.
    """
    y_last = y[:, :, -1]
    trunc_last = _truncate_top(y_last, r1)
    shared_idio = ptpoet.adaptive_threshold(y_last - trunc_last, tau, "soft")

    model_t = ptpoet.fit(y, None, r1, r2, tau)
    sieve = ptpoet.build_sieve(x_window, sieve_degree)
    model_p = ptpoet.fit(y, sieve, r1, r2, tau)

    preds = {
        "prvm": y_last,
        "poet": trunc_last + shared_idio,
        "tpoet": ptpoet.predict(model_t) - model_t.idio_mean + shared_idio,
        "ptpoet": ptpoet.predict(model_p, x_next) - model_p.idio_mean + shared_idio,
    }
    if include_eigen_ar:
        for name, method in (("fivar", "FIVAR"), ("fivar_h", "FIVAR_H")):
            spec = baselines.BaselineSpec(method=method, r1=r1, tau=tau)
            preds[name] = baselines.predict_fivar(y, spec)
    return preds


def run_seed(design: StudyDesign, seed: int,
             include_eigen_ar: bool = False) -> dict:
    """Score every method on one simulated stretch of days.

    Returns {(D, m): {method: (4,) mean norm errors over the target days}},
    norms ordered as NORMS.  include_eigen_ar adds the fixed-eigenvector
    AR and HAR eigenvalue forecasters to the method set.
    """
    base_m = max(design.m_grid)
    n_days = market_sim.COVARIATE_WARMUP + max(design.d_grid) + design.n_targets
    cfg = market_sim.SimConfig(p=design.p, D=max(design.d_grid), m=base_m, seed=seed)
    truth, panels = market_sim.simulate_paths(cfg, n_days)

    est, series, tau = {}, {}, {}
    for m in design.m_grid:
        factor = base_m // m
        day_est = [prvm(market_sim.subsample_panel(pl, factor)) for pl in panels]
        est[m] = day_est
        series[m] = np.array(
            [np.linalg.eigvalsh(g)[-design.r1 :].mean() for g in day_est]
        )
        tau[m] = ptpoet.default_tau(design.p, m)

    out = {}
    for D in design.d_grid:
        for m in design.m_grid:
            errors = {}
            for t in range(design.n_targets):
                tgt = n_days - design.n_targets + t
                target = truth.conditional_gamma_slice(tgt)
                y = np.stack(est[m][tgt - D : tgt], axis=2)
                x_all, x_next = ptpoet.har_covariates(series[m][:tgt])
                preds = method_predictions(
                    y, x_all[-D:], x_next, design.r1, design.r2, tau[m],
                    design.sieve_degree, include_eigen_ar,
                )
                for name, pred in preds.items():
                    errs = evaluation.norm_errors(pred, target)
                    errors.setdefault(name, []).append(
                        [errs[norm] for norm in NORMS]
                    )
            out[(D, m)] = {
                name: np.asarray(rows).mean(axis=0) for name, rows in errors.items()
            }
    return out


def run_comparison_study(design: StudyDesign, seeds,
                         include_eigen_ar: bool = False) -> dict:
    """Per-seed mean errors for every grid cell and method.

    Returns {(D, m): {method: (n_seeds, 4) array}} with norms in NORMS
    order; summarize with median_errors for ordering checks.
    """
    cells: dict = {}
    for seed in seeds:
        for key, methods in run_seed(design, seed, include_eigen_ar).items():
            for name, errs in methods.items():
                cells.setdefault(key, {}).setdefault(name, []).append(errs)
    return {
        key: {name: np.asarray(rows) for name, rows in methods.items()}
        for key, methods in cells.items()
    }


def median_errors(results: dict) -> dict:
    """Across-seed median of each cell's per-seed mean errors."""
    return {
        key: {name: np.median(rows, axis=0) for name, rows in methods.items()}
        for key, methods in results.items()
    }


def write_median_table(results: dict, csv_path) -> None:
    """Figure-shaped flat CSV: one row per (D, m, method, norm)."""
    medians = median_errors(results)
    path = Path(csv_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["D", "m", "method", "norm", "median_error"])
        for (D, m) in sorted(medians):
            for name in sorted(medians[(D, m)]):
                for j, norm in enumerate(NORMS):
                    writer.writerow(
                        [D, m, name, norm, f"{medians[(D, m)][name][j]:.17g}"]
                    )


def run_rank_study(seeds, p: int = 50, D: int = 100, m: int = 2000,
                   r_max: int = 5) -> dict:
    """Fraction of seeds on which each selector recovers the true ranks.

    Fits nothing: each seed simulates one stretch, estimates the daily
    matrices at the single frequency m, and applies the spectral-gap and
    eigenvalue-ratio selectors to modes 1 and 3.  r_max caps the candidate
    set; it should stay below secondary spectral cliffs of the weaker mode
    (the day mode of an estimated tensor has one such cliff where the
    day-varying factor estimation error block meets the noise floor).
    """
    hits = {"gap": 0, "ratio": 0}
    picks = []
    n_days = market_sim.COVARIATE_WARMUP + D
    for seed in seeds:
        cfg = market_sim.SimConfig(p=p, D=D, m=m, seed=seed)
        truth, panels = market_sim.simulate_paths(cfg, n_days)
        day_est = [prvm(pl) for pl in panels[-D:]]
        y = np.stack(day_est, axis=2)
        row = {}
        for name, selector in (
            ("gap", ptpoet.select_rank_gap),
            ("ratio", ptpoet.select_rank_ratio),
        ):
            r1 = selector(y, 1, r_max)
            r2 = selector(y, 3, r_max)
            row[name] = (r1, r2)
            if (r1, r2) == (3, 1):
                hits[name] += 1
        picks.append(row)
    n = len(picks)
    return {
        "n_seeds": n,
        "gap_rate": hits["gap"] / n,
        "ratio_rate": hits["ratio"] / n,
        "picks": picks,
    }
