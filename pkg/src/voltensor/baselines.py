"""Comparison predictors for the one-day-ahead volatility matrix.

Four reference methods, each producing a p x p prediction from a window of
estimated daily volatility matrices:

- PRVM: the last day's estimate, unmodified.
- POET: rank-r1 spectral truncation of the last day plus its adaptively
  thresholded residual.
- FIVAR / FIVAR_H: time-invariant eigenvectors (from a trailing average of
  slices) with per-eigenvalue AR or HAR dynamics fitted to the realized
  leading-eigenvalue series, plus the thresholded last-day residual.  The
  idiosyncratic part is not modeled dynamically.

All predictions are symmetric.  Thresholding uses the same kernel as the
projected tensor model.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from voltensor.ptpoet import adaptive_threshold
from voltensor.tensor_core import _values

METHODS = ("PRVM", "POET", "TPOET", "FIVAR", "FIVAR_H")


@dataclass(frozen=True)
class BaselineSpec:
    """Configuration for one baseline method."""

    method: str
    r1: int = 3
    tau: float = 0.0
    thresh_rule: str = "soft"
    eigvec_window: int = 21
    param_window: int = 252
    ar_lag: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.r1 < 1:
            raise ValueError("r1 must be positive")
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")
        if self.eigvec_window < 1 or self.param_window < 1:
            raise ValueError("windows must be positive")
        if self.ar_lag < 1:
            raise ValueError("ar_lag must be positive")


def _slices(y_hat) -> np.ndarray:
    y = _values(y_hat)
    if y.ndim != 3:
        raise ValueError(f"expected a p x p x D array, got shape {y.shape}")
    return y


def predict_prvm_last(y_hat) -> np.ndarray:
    """The raw last-day estimate as the prediction."""
    y = _slices(y_hat)
    return y[:, :, -1].copy()


def spectral_truncate(mat: np.ndarray, r1: int) -> np.ndarray:
    """Rank-r1 truncation keeping the r1 leading eigen-directions."""
    mat = np.asarray(mat, dtype=float)
    p = mat.shape[0]
    if not 1 <= r1 <= p:
        raise ValueError(f"r1 must be in [1, {p}], got {r1}")
    w, v = np.linalg.eigh(mat)
    top = v[:, -r1:]
    return (top * w[-r1:]) @ top.T


def predict_poet(slice_d: np.ndarray, r1: int, tau: float,
                 rule: str = "soft", sector_labels=None) -> np.ndarray:
    """Truncate the last day to rank r1 and threshold its residual."""
    slice_d = np.asarray(slice_d, dtype=float)
    low_rank = spectral_truncate(slice_d, r1)
    resid = adaptive_threshold(slice_d - low_rank, tau, rule, sector_labels)
    return low_rank + resid


def fit_ar(series: np.ndarray, lag: int) -> np.ndarray:
    """Least-squares AR(lag) coefficients (intercept, lag 1, ..., lag `lag`)."""
    series = np.asarray(series, dtype=float)
    n = series.size
    if n < lag + 2:
        raise ValueError(f"need at least {lag + 2} observations for AR({lag})")
    rows = np.column_stack(
        [np.ones(n - lag)] + [series[lag - k - 1 : n - k - 1] for k in range(lag)]
    )
    coefs, *_ = np.linalg.lstsq(rows, series[lag:], rcond=None)
    return coefs


def ar_one_step(series: np.ndarray, coefs: np.ndarray) -> float:
    """One-step AR forecast from (intercept, lag-1, ...) coefficients."""
    series = np.asarray(series, dtype=float)
    lag = len(coefs) - 1
    if series.size < lag:
        raise ValueError(f"need {lag} trailing values, have {series.size}")
    recent = series[-1 : -lag - 1 : -1] if lag else np.empty(0)
    return float(coefs[0] + coefs[1:] @ recent)


def fit_har(series: np.ndarray) -> np.ndarray:
    """Least-squares HAR(1, 5, 21) coefficients (intercept, daily, weekly, monthly)."""
    series = np.asarray(series, dtype=float)
    n = series.size
    if n < 23:
        raise ValueError("need at least 23 observations for the monthly term")
    rows = np.column_stack(
        [
            np.ones(n - 21),
            series[20:-1],
            np.array([series[t - 5 : t].mean() for t in range(21, n)]),
            np.array([series[t - 21 : t].mean() for t in range(21, n)]),
        ]
    )
    coefs, *_ = np.linalg.lstsq(rows, series[21:], rcond=None)
    return coefs


def har_one_step(series: np.ndarray, coefs: np.ndarray) -> float:
    """One-step HAR forecast from (intercept, daily, weekly, monthly)."""
    series = np.asarray(series, dtype=float)
    if series.size < 21:
        raise ValueError("need at least 21 trailing values")
    feats = np.array([series[-1], series[-5:].mean(), series[-21:].mean()])
    return float(coefs[0] + coefs[1:] @ feats)


def predict_fivar(y_hat, spec: BaselineSpec, sector_labels=None) -> np.ndarray:
    """Fixed-eigenvector prediction with AR or HAR eigenvalue dynamics.

    Eigenvectors come from the average of the last eigvec_window slices; the
    realized leading-eigenvalue series over the parameter window drives a
    per-eigenvalue one-step forecast (AR for FIVAR, HAR for FIVAR_H), floored
    at zero.  The idiosyncratic part is the thresholded last-day residual.
    """
    if spec.method not in ("FIVAR", "FIVAR_H"):
        raise ValueError(f"spec.method must be FIVAR or FIVAR_H, got {spec.method!r}")
    y = _slices(y_hat)
    p, _, n_days = y.shape
    if spec.r1 > p:
        raise ValueError(f"r1 = {spec.r1} exceeds p = {p}")
    if n_days < spec.eigvec_window:
        raise ValueError(
            f"need at least eigvec_window = {spec.eigvec_window} days, have {n_days}"
        )
    param_window = spec.param_window
    if n_days < param_window:
        warnings.warn(
            f"parameter window {param_window} shrunk to the {n_days} available days",
            UserWarning,
            stacklevel=2,
        )
        param_window = n_days

    avg = y[:, :, -spec.eigvec_window :].mean(axis=2)
    w, v = np.linalg.eigh(avg)
    xi = v[:, -spec.r1 :][:, ::-1]

    # realized leading eigenvalues, decreasing order, over the fit window
    eig_series = np.stack(
        [np.linalg.eigvalsh(y[:, :, l])[-spec.r1 :][::-1]
         for l in range(n_days - param_window, n_days)]
    )
    forecasts = np.empty(spec.r1)
    for k in range(spec.r1):
        series = eig_series[:, k]
        if spec.method == "FIVAR_H":
            forecasts[k] = har_one_step(series, fit_har(series))
        else:
            forecasts[k] = ar_one_step(series, fit_ar(series, spec.ar_lag))
    forecasts = np.maximum(forecasts, 0.0)

    factor = (xi * forecasts) @ xi.T
    resid_d = y[:, :, -1] - (xi * eig_series[-1]) @ xi.T
    idio = adaptive_threshold(resid_d, spec.tau, spec.thresh_rule, sector_labels)
    return factor + idio
