"""Session fixtures for the Monte-Carlo studies shared across test modules.

Both studies are deterministic (fixed seed lists, per-day child seeds), so
every test that consumes them sees identical numbers on every run.
"""

import time

import numpy as np
import pytest

from voltensor import market_sim, portfolio, study
from voltensor.ptpoet import default_tau, har_covariates
from voltensor.realized_vol import prvm

MINI_SEEDS = range(20)
MINI_C_GRID = tuple(float(c) for c in portfolio.DEFAULT_C_GRID)


@pytest.fixture(scope="session")
def comparison_study():
    """Four-method forecast comparison on the default design, 20 seeds.

    Heavy (roughly ten minutes).  Shared by the acceptance checks on the
    error-norm orderings and on the max-norm trends; elapsed wall time is
    recorded so the runtime bound can be asserted too.
    """
    design = study.StudyDesign()
    t0 = time.time()
    results = study.run_comparison_study(design, range(20))
    elapsed = time.time() - t0
    return {"design": design, "results": results, "elapsed": elapsed}


@pytest.fixture(scope="session")
def mini_study():
    """Small rolling one-step forecast study: 20 seeds, 8 targets each.

    For every seed, estimates are rolled forward over the last 8 days of a
    69-day simulation (p=20, m=400); each target day gets the four standard
    predictions from the trailing 40-day window.  Returns per-seed MSPE
    against the conditional truth for each method, plus per-seed average
    realized portfolio risk for the poet/ptpoet predictions over the default
    gross-exposure grid.
    """
    warm = market_sim.COVARIATE_WARMUP
    window, n_out = 40, 8
    r1, r2 = 3, 1
    tau = default_tau(20, 400)
    mspe = {name: [] for name in study.COMPARISON_METHODS}
    risk = {name: {c: [] for c in MINI_C_GRID} for name in ("poet", "ptpoet")}
    for seed in MINI_SEEDS:
        cfg = market_sim.SimConfig(p=20, D=window, m=400, seed=seed)
        n_days = warm + window + n_out
        truth, panels = market_sim.simulate_paths(cfg, n_days)
        est = [prvm(panel) for panel in panels]
        series = np.array([np.linalg.eigvalsh(g)[-r1:].mean() for g in est])
        sq_err = {name: [] for name in study.COMPARISON_METHODS}
        risk_preds = {"poet": [], "ptpoet": []}
        for t in range(n_out):
            tgt = n_days - n_out + t
            y = np.stack(est[tgt - window : tgt], axis=2)
            x_all, x_next = har_covariates(series[:tgt])
            preds = study.method_predictions(
                y, x_all[-window:], x_next, r1, r2, tau
            )
            target = truth.conditional_gamma_slice(tgt)
            for name in study.COMPARISON_METHODS:
                sq_err[name].append(np.sum((preds[name] - target) ** 2))
            for name in risk_preds:
                risk_preds[name].append(preds[name])
        for name in study.COMPARISON_METHODS:
            mspe[name].append(np.mean(sq_err[name]))
        rows = portfolio.backtest(
            risk_preds, panels[n_days - n_out :], c_grid=MINI_C_GRID
        )
        for row in rows:
            risk[row["method"]][float(row["c"])].append(row["avg_risk"])
    return {
        "methods": study.COMPARISON_METHODS,
        "c_grid": MINI_C_GRID,
        "mspe": {name: np.array(v) for name, v in mspe.items()},
        "risk": {
            name: {c: np.array(v) for c, v in per_c.items()}
            for name, per_c in risk.items()
        },
    }


@pytest.fixture(scope="session")
def rank_study():
    """Joint rank-selector hit rates over 50 seeds at the default design."""
    return study.run_rank_study(range(50))
