"""Gross-exposure-constrained minimum-variance portfolios and risk backtests.

The allocation problem is min w' S w subject to 1'w = 1 and ||w||_1 <= c.
The solver splits w = w+ - w- with w+/- >= 0, turning the l1 bound into the
linear constraint 1'(w+ + w-) <= c, and runs an accelerated projected
gradient on the resulting convex QP.  Projection onto the split feasible set
is exact: when the exposure bound is slack it reduces to a one-parameter
monotone equation, and when tight the two sum constraints decouple into a
pair of standard simplex projections.  Iterates are periodically polished by
solving the active-set KKT system exactly, so accepted solutions satisfy the
first-order conditions to near machine precision.

Backtests hold each day's optimal portfolio for one day and score it by the
realized volatility of its intraday log-returns at a fixed interval.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import optimize

logger = logging.getLogger(__name__)

DEFAULT_C_GRID = (1.0, 1.5, 2.0, 2.5, 3.0)
TRADING_DAY_MINUTES = 390


@dataclass(frozen=True)
class PortfolioProblem:
    """One allocation instance: predicted covariance, exposure bound, tolerances."""

    sigma: np.ndarray
    c: float
    tol: float = 1e-8
    max_iter: int = 20000

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
            raise ValueError(f"sigma must be square, got shape {sigma.shape}")
        if not np.allclose(sigma, sigma.T, atol=1e-10):
            raise ValueError("sigma must be symmetric")
        if self.c < 1.0:
            raise ValueError(
                f"c = {self.c} is infeasible: the budget constraint forces ||w||_1 >= 1"
            )
        if self.tol <= 0 or self.max_iter < 1:
            raise ValueError("tol must be positive and max_iter at least 1")
        object.__setattr__(self, "sigma", sigma)


def ensure_pd(sigma: np.ndarray, floor_scale: float = 1e-8) -> tuple[np.ndarray, bool]:
    """Eigenvalue-floor repair at floor_scale * trace / p; returns (matrix, floored)."""
    sigma = np.asarray(sigma, dtype=float)
    sigma = (sigma + sigma.T) / 2.0
    p = sigma.shape[0]
    floor = floor_scale * max(np.trace(sigma), 0.0) / p
    if floor <= 0:
        floor = floor_scale
    w, v = np.linalg.eigh(sigma)
    if w[0] >= floor:
        return sigma, False
    logger.info("PD floor applied: min eigenvalue %.3e raised to %.3e", w[0], floor)
    return (v * np.maximum(w, floor)) @ v.T, True


def _project_simplex(v: np.ndarray, total: float) -> np.ndarray:
    """Euclidean projection onto {z >= 0, sum(z) = total}."""
    if total <= 0:
        return np.zeros_like(v)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - total
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def _project_split(v: np.ndarray, p: int, c: float) -> np.ndarray:
    """Projection onto {z >= 0, 1'(z+ + z-) <= c, 1'(z+ - z-) = 1}."""
    vp, vm = v[:p], v[p:]
    # slack exposure: z = (v - lam*a)+ with a = (1, -1); solve 1'(z+ - z-) = 1
    scale = float(np.max(np.abs(v))) + c + 1.0
    lo, hi = -scale, scale
    for _ in range(200):
        lam = 0.5 * (lo + hi)
        h = np.maximum(vp - lam, 0.0).sum() - np.maximum(vm + lam, 0.0).sum()
        if h > 1.0:
            lo = lam
        else:
            hi = lam
    lam = 0.5 * (lo + hi)
    zp = np.maximum(vp - lam, 0.0)
    zm = np.maximum(vm + lam, 0.0)
    if zp.sum() + zm.sum() <= c + 1e-12:
        return np.concatenate([zp, zm])
    # tight exposure: both sums are pinned, so the blocks decouple
    zp = _project_simplex(vp, (c + 1.0) / 2.0)
    zm = _project_simplex(vm, (c - 1.0) / 2.0)
    return np.concatenate([zp, zm])


def kkt_residual(sigma: np.ndarray, w: np.ndarray, c: float) -> float:
    """First-order optimality residual of w for the allocation problem.

    The residual minimizes, over the two multipliers, the largest violation
    among stationarity, dual feasibility, and complementary slackness; this
    is a three-variable linear program (the violation is a max of affine
    functions of the multipliers).  Primal feasibility violations are added
    on top.  The result is normalized by the gradient scale.
    """
    sigma = np.asarray(sigma, dtype=float)
    w = np.asarray(w, dtype=float)
    grad = 2.0 * sigma @ w
    scale = max(1.0, float(np.max(np.abs(grad))))
    znorm = float(np.abs(w).sum())
    ztol = 1e-9 * max(1.0, float(np.max(np.abs(w))))
    support = np.abs(w) > ztol
    if not support.any():
        return np.inf
    signs = np.sign(w[support])
    g_sup, g_off = grad[support], grad[~support]

    # variables (lam, mu, t): minimize t subject to each violation <= t
    rows, rhs = [], []
    for gi, si in zip(g_sup, signs):
        rows.append([1.0, si, -1.0]); rhs.append(-gi)
        rows.append([-1.0, -si, -1.0]); rhs.append(gi)
    for gi in g_off:
        rows.append([1.0, -1.0, -1.0]); rhs.append(-gi)
        rows.append([-1.0, -1.0, -1.0]); rhs.append(gi)
    rows.append([0.0, c - znorm, -1.0]); rhs.append(0.0)
    lp = optimize.linprog(
        c=[0.0, 0.0, 1.0],
        A_ub=np.array(rows),
        b_ub=np.array(rhs),
        bounds=[(None, None), (0.0, None), (0.0, None)],
        method="highs",
    )
    res = float(lp.x[2]) if lp.success else np.inf
    res = max(res, scale * abs(float(w.sum()) - 1.0))
    res = max(res, scale * max(znorm - c, 0.0))
    return res / scale


def _closed_form(sigma: np.ndarray) -> np.ndarray:
    ones = np.ones(sigma.shape[0])
    x = np.linalg.solve(sigma, ones)
    return x / (ones @ x)


def _polish(sigma: np.ndarray, w: np.ndarray, c: float, tol: float):
    """Solve the active-set KKT system exactly; None when the guess fails."""
    p = w.size
    ztol = 1e-7 * max(1.0, float(np.max(np.abs(w))))
    support = np.abs(w) > ztol
    if not support.any():
        return None
    idx = np.nonzero(support)[0]
    s = np.sign(w[idx])
    k = idx.size
    sys = np.zeros((k + 2, k + 2))
    sys[:k, :k] = 2.0 * sigma[np.ix_(idx, idx)]
    sys[:k, k] = 1.0
    sys[:k, k + 1] = s
    sys[k, :k] = 1.0
    sys[k + 1, :k] = s
    rhs = np.zeros(k + 2)
    rhs[k] = 1.0
    rhs[k + 1] = c
    try:
        sol = np.linalg.solve(sys, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(sys, rhs, rcond=None)
    cand = np.zeros(p)
    cand[idx] = sol[:k]
    # no check on the multipliers: with uniform support signs the two
    # constraints coincide and the (lam, mu) split is not identified
    if np.any(sol[:k] * s < -1e-12):
        return None
    if kkt_residual(sigma, cand, c) < tol:
        return cand
    return None


def solve_min_variance(prob: PortfolioProblem) -> np.ndarray:
    """Optimal weights for the exposure-constrained minimum-variance problem."""
    sigma, c = prob.sigma, prob.c
    p = sigma.shape[0]
    eigs = np.linalg.eigvalsh(sigma)
    if eigs[0] <= 0:
        raise ValueError(
            f"sigma is not positive definite (min eigenvalue {eigs[0]:.3e}); "
            "apply the PD floor (ensure_pd) before solving"
        )
    w_cf = _closed_form(sigma)
    if np.abs(w_cf).sum() <= c + 1e-12:
        return w_cf

    step = 1.0 / (4.0 * eigs[-1])
    z = np.concatenate([np.maximum(w_cf, 0.0), np.maximum(-w_cf, 0.0)])
    z = _project_split(z, p, c)
    y, t_acc = z.copy(), 1.0
    fp_res = np.inf
    for it in range(prob.max_iter):
        w = y[:p] - y[p:]
        gw = 2.0 * sigma @ w
        grad = np.concatenate([gw, -gw])
        z_new = _project_split(y - step * grad, p, c)
        if (y - z_new) @ (z_new - z) > 0:
            # momentum points uphill: restart the acceleration, which is
            # what lets the support settle instead of oscillating
            t_acc = 1.0
            y = z_new.copy()
        else:
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_acc**2))
            y = z_new + ((t_acc - 1.0) / t_new) * (z_new - z)
            t_acc = t_new
        fp_res = float(np.max(np.abs(z_new - z)))
        z = z_new
        if it % 50 == 49 and fp_res < 1e-5:
            polished = _polish(sigma, z[:p] - z[p:], c, prob.tol)
            if polished is not None:
                return polished
        if fp_res < 1e-13:
            break
    w = z[:p] - z[p:]
    polished = _polish(sigma, w, c, prob.tol)
    if polished is not None:
        return polished
    res = kkt_residual(sigma, w, c)
    if res < prob.tol:
        return w
    raise RuntimeError(
        f"iteration budget {prob.max_iter} exhausted: KKT residual {res:.3e}, "
        f"fixed-point residual {fp_res:.3e}"
    )


def realized_portfolio_risk(weights: np.ndarray, log_prices: np.ndarray,
                            interval_steps: int) -> float:
    """Daily realized volatility of linearized portfolio interval returns."""
    if interval_steps < 1:
        raise ValueError("interval_steps must be positive")
    sampled = log_prices[::interval_steps]
    if sampled.shape[0] < 2:
        raise ValueError("not enough grid points for the return interval")
    port = sampled @ weights
    returns = np.diff(port)
    return float(np.sqrt(np.sum(returns**2)))


def backtest(predictions: dict, panels: list, c_grid=DEFAULT_C_GRID,
             ret_interval_minutes: float = 10.0, tol: float = 1e-8) -> list[dict]:
    """Average realized risk per method and exposure bound.

    predictions maps method name to a list of predicted covariance matrices,
    one per out-of-sample day, aligned with panels (the realized intraday
    panels for those days).  Predictions get the PD floor before solving.
    Days with missing data (None panel or prediction) are skipped and
    counted.  Returns rows {method, c, avg_risk, n_days, n_skipped}.
    """
    rows = []
    for method, preds in predictions.items():
        if len(preds) != len(panels):
            raise ValueError(
                f"{method}: {len(preds)} predictions vs {len(panels)} panels"
            )
        for c in c_grid:
            risks = []
            skipped = 0
            for pred, panel in zip(preds, panels):
                if pred is None or panel is None:
                    skipped += 1
                    continue
                sigma, _ = ensure_pd(pred)
                weights = solve_min_variance(PortfolioProblem(sigma, c, tol=tol))
                m = panel.log_prices.shape[0] - 1
                steps = max(1, round(m * ret_interval_minutes / TRADING_DAY_MINUTES))
                risks.append(
                    realized_portfolio_risk(weights, panel.log_prices, steps)
                )
            if skipped:
                logger.info("%s c=%.2f: skipped %d days", method, c, skipped)
            rows.append(
                {
                    "method": method,
                    "c": float(c),
                    "avg_risk": float(np.mean(risks)) if risks else float("nan"),
                    "n_days": len(risks),
                    "n_skipped": skipped,
                }
            )
    return rows


def write_risk_table(rows: list[dict], csv_path, period: str = "full") -> None:
    """Risk-vs-exposure table as CSV (method, period, c, avg_risk, n_days)."""
    with Path(csv_path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "period", "c", "avg_risk", "n_days"])
        for row in rows:
            writer.writerow(
                [row["method"], period, row["c"], f"{row['avg_risk']:.10g}", row["n_days"]]
            )
