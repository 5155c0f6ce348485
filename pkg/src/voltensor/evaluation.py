"""Forecast-quality metrics for volatility matrix predictions.

Matrix-norm errors (Frobenius, entrywise max, spectral, and a truth-whitened
relative Frobenius norm), the MSPE and QLIKE losses against a proxy series,
and the Diebold-Mariano test for comparing two loss series.

The relative norm whitens by the truth: rel(A) = ||T^{-1/2} A T^{-1/2}||_F
/ sqrt(p) for the error A = pred - truth, so factor-scale and idiosyncratic-
scale errors are weighted by their predictable variance.  It requires a
positive definite truth and is reported as None with a reason otherwise.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

QLIKE_COND_LIMIT = 1e12


@dataclass(frozen=True)
class LossSeries:
    """Per-day losses for one method, in MSPE or QLIKE units."""

    method: str
    losses: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.losses, dtype=float)
        if arr.ndim != 1:
            raise ValueError("losses must be one-dimensional")
        if not np.all(np.isfinite(arr)):
            raise ValueError("losses must be finite")
        object.__setattr__(self, "losses", arr)


def _check_square_pair(pred, truth):
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape or pred.ndim != 2 or pred.shape[0] != pred.shape[1]:
        raise ValueError(
            f"expected matching square matrices, got {pred.shape} and {truth.shape}"
        )
    return pred, truth


def norm_errors(pred, truth) -> dict:
    """Four norm errors of pred - truth; relative norm only for PD truth."""
    pred, truth = _check_square_pair(pred, truth)
    p = pred.shape[0]
    delta = pred - truth
    out = {
        "frobenius": float(np.linalg.norm(delta)),
        "max": float(np.abs(delta).max()),
        "spectral": float(np.linalg.norm(delta, 2)),
    }
    w, v = np.linalg.eigh(truth)
    if w[0] <= 0:
        out["relative_frobenius"] = None
        out["relative_frobenius_reason"] = (
            f"truth is not positive definite (min eigenvalue {w[0]:.3e})"
        )
        return out
    root = v / np.sqrt(w)
    out["relative_frobenius"] = float(np.linalg.norm(root.T @ delta @ root) / np.sqrt(p))
    return out


def mspe(preds, proxies) -> float:
    """Average squared Frobenius distance to the proxy series."""
    if len(preds) != len(proxies):
        raise ValueError(f"{len(preds)} predictions vs {len(proxies)} proxies")
    if not preds:
        raise ValueError("empty series")
    total = 0.0
    for pred, proxy in zip(preds, proxies):
        pred, proxy = _check_square_pair(pred, proxy)
        total += float(np.sum((pred - proxy) ** 2))
    return total / len(preds)


def qlike(preds, proxies) -> tuple[float, int]:
    """Average log det(pred) + tr(pred^{-1} proxy); ill-conditioned days dropped.

    Returns (average over included days, number of excluded days).  A day is
    excluded when the prediction is not positive definite or its condition
    number exceeds 1e12, mirroring how near-singular raw estimators are
    omitted from this loss.
    """
    if len(preds) != len(proxies):
        raise ValueError(f"{len(preds)} predictions vs {len(proxies)} proxies")
    if not preds:
        raise ValueError("empty series")
    total, included, excluded = 0.0, 0, 0
    for pred, proxy in zip(preds, proxies):
        pred, proxy = _check_square_pair(pred, proxy)
        w, v = np.linalg.eigh(pred)
        if w[0] <= 0 or w[-1] / w[0] > QLIKE_COND_LIMIT:
            excluded += 1
            continue
        inv = (v / w) @ v.T
        total += float(np.sum(np.log(w)) + np.trace(inv @ proxy))
        included += 1
    if included == 0:
        raise ValueError("all days excluded as ill-conditioned")
    return total / included, excluded


def _as_losses(series) -> np.ndarray:
    if isinstance(series, LossSeries):
        return series.losses
    arr = np.asarray(series, dtype=float)
    if arr.ndim != 1:
        raise ValueError("loss series must be one-dimensional")
    return arr


def dm_test(loss_a, loss_b, hac_lags: int | None = None) -> dict:
    """Diebold-Mariano comparison of two loss series.

    The statistic is mean(d) / sqrt(hac_var / T) for d_t = a_t - b_t, with a
    Bartlett-kernel long-run variance using hac_lags lags (default
    floor(T^{1/3})) and a two-sided normal p-value.  A degenerate difference
    series (zero variance) yields p = 1 and a flag instead of a statistic.
    """
    a = _as_losses(loss_a)
    b = _as_losses(loss_b)
    if a.size != b.size:
        raise ValueError(f"series lengths differ: {a.size} vs {b.size}")
    t = a.size
    if t < 10:
        raise ValueError(f"need at least 10 observations, got {t}")
    if hac_lags is None:
        hac_lags = int(math.floor(t ** (1.0 / 3.0)))
    if hac_lags < 0 or hac_lags >= t:
        raise ValueError(f"hac_lags must be in [0, {t - 1}], got {hac_lags}")

    d = a - b
    d_bar = d.mean()
    centered = d - d_bar
    gamma0 = float(centered @ centered) / t
    if gamma0 <= 0:
        return {"statistic": None, "p_value": 1.0, "degenerate": True}
    lrv = gamma0
    for j in range(1, hac_lags + 1):
        gamma_j = float(centered[j:] @ centered[:-j]) / t
        lrv += 2.0 * (1.0 - j / (hac_lags + 1.0)) * gamma_j
    if lrv <= 0:
        return {"statistic": None, "p_value": 1.0, "degenerate": True}
    statistic = d_bar / math.sqrt(lrv / t)
    p_value = 2.0 * float(stats.norm.sf(abs(statistic)))
    return {"statistic": statistic, "p_value": p_value, "degenerate": False}


def write_results_table(records: list[dict], csv_path, json_path=None) -> None:
    """Write metric records (method, period, metric, value) as CSV and JSON."""
    fields = ["method", "period", "metric", "value"]
    for rec in records:
        missing = [f for f in fields if f not in rec]
        if missing:
            raise ValueError(f"record missing fields {missing}: {rec}")
    csv_path = Path(csv_path)
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(records)
    if json_path is not None:
        Path(json_path).write_text(
            json.dumps(records, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


def write_dm_matrix(methods: list[str], p_values: np.ndarray, csv_path) -> None:
    """Write a square DM p-value matrix with method names on both axes."""
    p_values = np.asarray(p_values, dtype=float)
    n = len(methods)
    if p_values.shape != (n, n):
        raise ValueError(f"expected a {n}x{n} matrix, got {p_values.shape}")
    with Path(csv_path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", *methods])
        for name, row in zip(methods, p_values):
            writer.writerow([name, *(f"{v:.6g}" for v in row)])
