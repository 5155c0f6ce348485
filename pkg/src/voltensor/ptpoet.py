"""Projected tensor factor model for daily volatility matrices.

The daily volatility matrices Gamma_l = Psi_l + Sigma_l are stacked into a
p x p x D tensor whose factor part has a Tucker structure F x1 Q x2 Q x3 V.
The day loadings V are treated as smooth functions of observed covariates
(realized-eigenvalue averages, say), approximated by an additive polynomial
sieve.  Projecting the day mode onto the sieve's column space before
extracting principal components turns the loadings into estimable functions,
which is what makes one-day-ahead prediction possible: evaluate the fitted
loading function at tomorrow's covariate value.

Fitting steps, given an estimated tensor Y and sieve design on X:

1. truncate each daily slice to its r1 leading eigen-directions;
2. project the day mode: S = trunc(Y) x3 P, with P the projector onto
   col(Phi(X)); take Q = r1 leading left singular vectors of the mode-1
   unfolding of S;
3. take G = r2 leading left singular vectors of the mode-3 unfolding and
   regress G on the basis for the coefficient matrix A, so g(x) = phi(x)'A;
4. core F = S x1 Q' x2 Q' x3 G'; smooth part S_hat = F x1 Q x2 Q x3 G;
5. adaptively threshold the daily residuals Y_l - S_hat_l;
6. predict day D+1 as F x1 Q x2 Q x3 g(x_next) plus the average
   thresholded residual.

Passing sieve=None skips the projection and yields the unprojected variant
used as a baseline; it has no loading function, so prediction falls back to
the last day's estimated loading.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from voltensor.tensor_core import (
    VolTensor,
    _values,
    leading_left_singular_vectors,
    matricize,
    mode_product,
)

_PROJ_TOL = 1e-8

THRESH_RULES = ("soft", "hard", "sector-hard")


def default_tau(p: int, m: int) -> float:
    """Threshold level sqrt(2 log p / sqrt(m)) used throughout the studies."""
    return float(np.sqrt(2.0 * np.log(p) / np.sqrt(m)))


def har_covariates(series, windows=(1, 5, 21)):
    """Backward-average covariates from a daily scalar series.

    The row for target day t holds, for each window w, the mean of the w
    values ending at day t-1.  Returns (X, x_next): X has one row per target
    day max(windows)..n-1 (aligned with the series index), x_next is the row
    for day n, one step past the end.
    """
    series = np.asarray(series, dtype=float).ravel()
    warm = max(windows)
    n = series.size
    if n < warm:
        raise ValueError(f"need at least {warm} values, got {n}")
    rows = np.array(
        [[series[t - w : t].mean() for w in windows] for t in range(warm, n + 1)]
    )
    return rows[:-1], rows[-1]


# ---------------------------------------------------------------------------
# sieve basis


@dataclass
class SieveDesign:
    """Standardized additive polynomial basis and its projection matrix.

    Basis columns are x_j, x_j^2, ..., x_j^J for each covariate j, each
    standardized to zero mean and unit variance over the sample; the same
    statistics are reused when evaluating the basis at a new point.
    """

    X: np.ndarray            # D x d raw covariates
    J: int
    intercept: bool
    phi: np.ndarray          # D x (J d [+ 1]) standardized basis
    projection: np.ndarray   # D x D
    col_mean: np.ndarray
    col_sd: np.ndarray
    col_names: list
    x_mean: np.ndarray       # per-covariate stats for the extrapolation guard
    x_sd: np.ndarray

    def __post_init__(self):
        p2 = self.projection @ self.projection
        if np.max(np.abs(p2 - self.projection)) > _PROJ_TOL:
            raise ValueError("projection matrix is not idempotent")
        if np.max(np.abs(self.projection - self.projection.T)) > _PROJ_TOL:
            raise ValueError("projection matrix is not symmetric")

    @property
    def n_days(self) -> int:
        return self.X.shape[0]

    def basis_row(self, x) -> np.ndarray:
        """Standardized basis values at one covariate point."""
        x = np.asarray(x, dtype=float).ravel()
        if x.size != self.X.shape[1]:
            raise ValueError(f"expected {self.X.shape[1]} covariates, got {x.size}")
        if not np.all(np.isfinite(x)):
            raise ValueError("covariates must be finite")
        raw = np.concatenate([x[j] ** np.arange(1, self.J + 1) for j in range(x.size)])
        if self.intercept:
            raw = np.concatenate([[1.0], raw])
        return (raw - self.col_mean) / self.col_sd


def _raw_basis(x_mat: np.ndarray, degree: int) -> np.ndarray:
    cols = [x_mat[:, [j]] ** k for j in range(x_mat.shape[1]) for k in range(1, degree + 1)]
    return np.hstack(cols)


def build_sieve(X, J: int, basis: str = "additive-polynomial",
                intercept: bool = True) -> SieveDesign:
    """Build the additive polynomial sieve design for covariates X.

    Requires more days than basis columns and a full-rank basis; rank
    deficiency is reported with the names of the collinear columns.  With
    intercept=True (the default) the column space contains the constant
    vector, so projecting the day mode preserves the time-mean of the
    factor part; without it the standardized columns are all zero-mean and
    the level must be carried by the residual term instead.
    """
    if basis != "additive-polynomial":
        raise ValueError(f"unsupported basis {basis!r}")
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("covariates must be a D x d matrix")
    if not np.all(np.isfinite(X)):
        raise ValueError("covariates must be finite")
    n_days, d = X.shape
    if J < 1:
        raise ValueError("J must be at least 1")
    n_cols = J * d + int(intercept)
    if n_days <= n_cols:
        raise ValueError(
            f"need more days than basis columns: D={n_days} <= {n_cols}"
        )
    sds = X.std(axis=0)
    if np.any(sds == 0):
        bad = [int(i) for i in np.flatnonzero(sds == 0)]
        raise ValueError(f"constant covariate columns: {bad}")

    raw = _raw_basis(X, J)
    names = [f"x{j + 1}^{k}" for j in range(d) for k in range(1, J + 1)]
    col_mean = raw.mean(axis=0)
    col_sd = raw.std(axis=0)
    if np.any(col_sd == 0):
        bad = [names[i] for i in np.flatnonzero(col_sd == 0)]
        raise ValueError(f"degenerate basis columns: {bad}")
    if intercept:
        # the constant column passes through standardization untouched
        raw = np.hstack([np.ones((n_days, 1)), raw])
        names = ["1"] + names
        col_mean = np.concatenate([[0.0], col_mean])
        col_sd = np.concatenate([[1.0], col_sd])
    phi = (raw - col_mean) / col_sd

    rank = np.linalg.matrix_rank(phi)
    if rank < phi.shape[1]:
        # pivoted QR puts dependent columns last
        _, _, piv = scipy.linalg.qr(phi, mode="economic", pivoting=True)
        bad = sorted(names[i] for i in piv[rank:])
        raise ValueError(f"collinear basis columns: {bad}")
    q, _ = np.linalg.qr(phi)
    return SieveDesign(
        X=X,
        J=J,
        intercept=intercept,
        phi=phi,
        projection=q @ q.T,
        col_mean=col_mean,
        col_sd=col_sd,
        col_names=names,
        x_mean=X.mean(axis=0),
        x_sd=sds,
    )


# ---------------------------------------------------------------------------
# fitting


def spectral_truncate_days(tensor, r1: int):
    """Replace each daily slice by its rank-r1 eigen-truncation.

    Directions are ranked by eigenvalue magnitude, which coincides with the
    usual decreasing-eigenvalue order on PSD slices but also does the right
    thing on the indefinite slices that arise after day-mode projection or
    with sign-changing loadings.
    """
    vals = _values(tensor)
    p = vals.shape[0]
    if not 1 <= r1 <= p:
        raise ValueError(f"r1 must be in [1, {p}], got {r1}")
    if r1 == p:
        return tensor
    sym = 0.5 * (vals + vals.transpose(1, 0, 2))
    w, vecs = np.linalg.eigh(np.moveaxis(sym, 2, 0))
    idx = np.argsort(-np.abs(w), axis=1, kind="stable")[:, :r1]
    w_top = np.take_along_axis(w, idx, axis=1)
    v_top = np.take_along_axis(vecs, idx[:, None, :], axis=2)
    out = np.einsum("lir,lr,ljr->ijl", v_top, w_top, v_top)
    if isinstance(tensor, VolTensor):
        return VolTensor(out)
    return out


def adaptive_threshold(mat: np.ndarray, tau: float, rule: str = "soft",
                       sector_labels=None) -> np.ndarray:
    """Entrywise thresholding with level tau * sqrt((s_ii v 0)(s_jj v 0)).

    soft shrinks surviving entries toward zero, hard keeps them as they are,
    and sector-hard ignores tau off the diagonal: it keeps entries whose
    assets share a sector label and zeroes the rest.  The diagonal is always
    kept, clamped at zero.
    """
    if rule not in THRESH_RULES:
        raise ValueError(f"rule must be one of {THRESH_RULES}, got {rule!r}")
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    mat = np.asarray(mat, dtype=float)
    diag = np.clip(np.diag(mat), 0.0, None)
    if rule == "sector-hard":
        if sector_labels is None:
            raise ValueError("sector-hard rule requires sector_labels")
        labels = np.asarray(sector_labels)
        if labels.shape != (mat.shape[0],):
            raise ValueError("sector_labels must have one entry per asset")
        out = np.where(labels[:, None] == labels[None, :], mat, 0.0)
    else:
        with np.errstate(invalid="ignore"):
            level = tau * np.sqrt(np.outer(diag, diag))
        # tau = inf with a zero variance: treat the threshold as infinite
        level[np.isnan(level)] = np.inf
        if rule == "soft":
            out = np.sign(mat) * np.maximum(np.abs(mat) - level, 0.0)
        else:
            out = np.where(np.abs(mat) > level, mat, 0.0)
    np.fill_diagonal(out, diag)
    return out


@dataclass
class PtPoetModel:
    """Fitted projected tensor factor model.

    loading_q and loading_g are orthonormal asset and day loadings, coeffs
    maps the sieve basis to day loadings (None for the unprojected variant),
    core is the r1 x r1 x r2 core tensor, and idio_hats holds the D
    thresholded daily residual matrices whose average is idio_mean.
    """

    r1: int
    r2: int
    loading_q: np.ndarray
    loading_g: np.ndarray
    coeffs: np.ndarray | None
    core: np.ndarray
    idio_hats: np.ndarray
    idio_mean: np.ndarray
    tau: float
    thresh_rule: str
    sieve: SieveDesign | None
    sector_labels: np.ndarray | None = None

    def __post_init__(self):
        for name, mat in (("loading_q", self.loading_q), ("loading_g", self.loading_g)):
            gram = mat.T @ mat
            if np.max(np.abs(gram - np.eye(mat.shape[1]))) > 1e-8:
                raise ValueError(f"{name} is not orthonormal")

    @property
    def p(self) -> int:
        return self.loading_q.shape[0]

    @property
    def idio_last(self) -> np.ndarray:
        return self.idio_hats[-1]

    def loading_fn(self, x) -> np.ndarray:
        """Estimated day-loading function g(x) = phi(x)'A."""
        if self.sieve is None or self.coeffs is None:
            raise ValueError("unprojected model has no loading function")
        return self.sieve.basis_row(x) @ self.coeffs


def fit(y_hat, sieve: SieveDesign | None, r1: int, r2: int, tau: float,
        thresh_rule: str = "soft", sector_labels=None) -> PtPoetModel:
    """Fit the projected model to an estimated volatility tensor.

    sieve=None fits the unprojected variant (no day-mode projection, no
    loading function).  tau and thresh_rule control the residual
    thresholding; sector-hard additionally needs per-asset sector_labels.
    """
    y = _values(y_hat)
    p, _, n_days = y.shape
    if not 1 <= r1 <= p:
        raise ValueError(f"r1 must be in [1, {p}], got {r1}")
    if not 1 <= r2 <= n_days:
        raise ValueError(f"r2 must be in [1, {n_days}], got {r2}")
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    if thresh_rule not in THRESH_RULES:
        raise ValueError(f"thresh_rule must be one of {THRESH_RULES}")
    if (sector_labels is None) == (thresh_rule == "sector-hard"):
        raise ValueError("sector_labels required exactly for the sector-hard rule")
    if sieve is not None and sieve.n_days != n_days:
        raise ValueError(
            f"sieve covers {sieve.n_days} days but tensor has {n_days}"
        )

    s_bar = spectral_truncate_days(y, r1)
    s_tilde = s_bar if sieve is None else mode_product(s_bar, sieve.projection, 3)

    q = leading_left_singular_vectors(matricize(s_tilde, 1), r1)
    g = leading_left_singular_vectors(matricize(s_tilde, 3), r2)
    coeffs = None
    if sieve is not None:
        coeffs, *_ = np.linalg.lstsq(sieve.phi, g, rcond=None)

    core = mode_product(mode_product(mode_product(s_tilde, q.T, 1), q.T, 2), g.T, 3)
    smooth = mode_product(mode_product(mode_product(core, q, 1), q, 2), g, 3)
    resid = y - smooth
    idio = np.stack(
        [
            adaptive_threshold(resid[:, :, l], tau, thresh_rule, sector_labels)
            for l in range(n_days)
        ]
    )
    return PtPoetModel(
        r1=r1,
        r2=r2,
        loading_q=q,
        loading_g=g,
        coeffs=coeffs,
        core=core,
        idio_hats=idio,
        idio_mean=idio.mean(axis=0),
        tau=float(tau),
        thresh_rule=thresh_rule,
        sieve=sieve,
        sector_labels=None if sector_labels is None else np.asarray(sector_labels),
    )


def predict(model: PtPoetModel, x_next=None, psd_floor: bool = False,
            idio: str = "mean") -> np.ndarray:
    """One-day-ahead volatility matrix prediction.

    Projected models evaluate the loading function at x_next (a warning is
    issued when x_next lies more than 10 training standard deviations from
    the covariate mean); unprojected models reuse the last day's loading and
    ignore x_next.  idio selects the residual summand: the average
    thresholded residual ("mean") or the last day's ("last").  psd_floor
    clips eigenvalues at 1e-8 for downstream solvers that need PD input.
    """
    if idio not in ("mean", "last"):
        raise ValueError(f"idio must be 'mean' or 'last', got {idio!r}")
    if model.sieve is None:
        g_next = model.loading_g[-1]
    else:
        if x_next is None:
            raise ValueError("projected model prediction requires x_next")
        x = np.asarray(x_next, dtype=float).ravel()
        dist = np.abs(x - model.sieve.x_mean) / model.sieve.x_sd
        if np.any(dist > 10):
            worst = int(np.argmax(dist))
            warnings.warn(
                f"covariate {worst} is {dist[worst]:.1f} training sds from the "
                "mean; prediction extrapolates",
                RuntimeWarning,
            )
        g_next = model.loading_fn(x)
    factor = model.loading_q @ np.einsum("abk,k->ab", model.core, g_next) @ model.loading_q.T
    pred = factor + (model.idio_mean if idio == "mean" else model.idio_last)
    pred = 0.5 * (pred + pred.T)
    if psd_floor:
        w, vecs = np.linalg.eigh(pred)
        pred = (vecs * np.clip(w, 1e-8, None)) @ vecs.T
        pred = 0.5 * (pred + pred.T)
    return pred


# ---------------------------------------------------------------------------
# tuning-parameter selection


def _singular_values(y_hat, mode: int) -> np.ndarray:
    if mode not in (1, 3):
        raise ValueError(f"mode must be 1 or 3, got {mode}")
    return np.linalg.svd(matricize(y_hat, mode), compute_uv=False)


def select_rank_gap(y_hat, mode: int, r_max: int) -> int:
    """Rank with the largest successive singular value gap."""
    s = _singular_values(y_hat, mode)
    if not 1 <= r_max < s.size:
        raise ValueError(f"r_max must be in [1, {s.size - 1}], got {r_max}")
    return int(np.argmax(s[:r_max] - s[1 : r_max + 1])) + 1


def select_rank_ratio(y_hat, mode: int, r_max: int) -> int:
    """Rank with the largest successive singular value ratio."""
    s = _singular_values(y_hat, mode)
    if not 1 <= r_max < s.size:
        raise ValueError(f"r_max must be in [1, {s.size - 1}], got {r_max}")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = s[:r_max] / s[1 : r_max + 1]
    ratios[np.isnan(ratios)] = 1.0
    return int(np.argmax(ratios)) + 1


def select_rank_penalized(y_hats, m: int, r_max: int = 20, c1_scale: float = 0.15,
                          c2: float = 0.5) -> int:
    """Penalized scree criterion on daily eigenvalues.

    Minimizes over j the average across days of
    p^-1 eig_j + j * c1_scale * eig_rmax * (sqrt(log p / sqrt(m) + log p / p))^c2
    and returns the argmin minus one (floored at 1, so a featureless
    spectrum maps to rank 1 rather than 0).  m is the intraday sample size
    behind each daily matrix, which sets the penalty rate.
    """
    vals = _values(y_hats)
    if isinstance(y_hats, VolTensor) or vals.shape[0] == vals.shape[1]:
        slices = np.moveaxis(vals, 2, 0)  # slice-last tensor layout
    else:
        slices = vals  # already a stack of daily matrices
    p = slices.shape[1]
    if r_max < 2:
        raise ValueError("r_max must be at least 2")
    if r_max > p:
        warnings.warn(f"r_max lowered from {r_max} to p={p}", RuntimeWarning)
        r_max = p
    eigs = np.linalg.eigvalsh(0.5 * (slices + slices.transpose(0, 2, 1)))[:, ::-1]
    rate = np.sqrt(np.log(p) / np.sqrt(m) + np.log(p) / p) ** c2
    js = np.arange(1, r_max + 1)
    objective = (eigs[:, :r_max] / p).mean(axis=0) + js * c1_scale * eigs[:, r_max - 1].mean() * rate
    return max(int(np.argmin(objective)) + 1 - 1, 1)


def select_tau_cv(y_hat, sieve, r1: int, r2: int, grid, n_folds: int = 5,
                  thresh_rule: str = "soft", seed: int = 0) -> float:
    """Pick tau from a grid by cross-validation over days.

    Days are split into folds; for each candidate tau the thresholded
    average residual from the training days is scored against the raw
    average residual from the held-out days in squared Frobenius norm.
    """
    grid = [float(t) for t in grid]
    if not grid or any(t < 0 for t in grid):
        raise ValueError("grid must be nonempty with nonnegative entries")
    base = fit(y_hat, sieve, r1, r2, tau=0.0, thresh_rule="hard")
    y = _values(y_hat)
    smooth = mode_product(
        mode_product(mode_product(base.core, base.loading_q, 1), base.loading_q, 2),
        base.loading_g,
        3,
    )
    raw = np.moveaxis(y - smooth, 2, 0)
    n_days = raw.shape[0]
    if not 2 <= n_folds <= n_days:
        raise ValueError("n_folds must be between 2 and the number of days")
    order = np.random.default_rng(seed).permutation(n_days)
    folds = np.array_split(order, n_folds)
    scores = np.zeros(len(grid))
    for hold in folds:
        mask = np.ones(n_days, dtype=bool)
        mask[hold] = False
        target = raw[hold].mean(axis=0)
        train_mean = raw[mask].mean(axis=0)
        for i, tau in enumerate(grid):
            thresh = adaptive_threshold(train_mean, tau, thresh_rule)
            scores[i] += np.sum((thresh - target) ** 2)
    return grid[int(np.argmin(scores))]


# ---------------------------------------------------------------------------
# model serialization


def save_model(model: PtPoetModel, path_prefix) -> None:
    """Write a fitted model as a JSON header plus an array bundle.

    Only the last daily residual matrix is kept; a reloaded model predicts
    identically but does not retain the full per-day residual history.
    """
    prefix = Path(path_prefix)
    arrays = {
        "loading_q": model.loading_q,
        "loading_g": model.loading_g,
        "core": model.core,
        "idio_mean": model.idio_mean,
        "idio_last": model.idio_last,
    }
    if model.coeffs is not None:
        arrays["coeffs"] = model.coeffs
    if model.sieve is not None:
        arrays["sieve_X"] = model.sieve.X
    if model.sector_labels is not None:
        arrays["sector_labels"] = model.sector_labels
    np.savez(prefix.with_suffix(".npz"), **arrays)
    header = {
        "format_version": 1,
        "r1": model.r1,
        "r2": model.r2,
        "tau": model.tau,
        "thresh_rule": model.thresh_rule,
        "sieve": None
        if model.sieve is None
        else {
            "J": model.sieve.J,
            "basis": "additive-polynomial",
            "intercept": model.sieve.intercept,
            "col_names": model.sieve.col_names,
            "col_mean": model.sieve.col_mean.tolist(),
            "col_sd": model.sieve.col_sd.tolist(),
        },
        "arrays_file": prefix.with_suffix(".npz").name,
    }
    with open(prefix.with_suffix(".json"), "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path_prefix) -> PtPoetModel:
    prefix = Path(path_prefix)
    with open(prefix.with_suffix(".json")) as fh:
        header = json.load(fh)
    if header.get("format_version") != 1:
        raise ValueError(f"unsupported model format {header.get('format_version')!r}")
    with np.load(prefix.with_suffix(".npz")) as bundle:
        arrays = {k: bundle[k] for k in bundle.files}
    sieve = None
    if header["sieve"] is not None:
        sieve = build_sieve(
            arrays["sieve_X"],
            header["sieve"]["J"],
            intercept=header["sieve"]["intercept"],
        )
    idio_hats = np.stack([arrays["idio_last"]])
    return PtPoetModel(
        r1=int(header["r1"]),
        r2=int(header["r2"]),
        loading_q=arrays["loading_q"],
        loading_g=arrays["loading_g"],
        coeffs=arrays.get("coeffs"),
        core=arrays["core"],
        idio_hats=idio_hats,
        idio_mean=arrays["idio_mean"],
        tau=float(header["tau"]),
        thresh_rule=header["thresh_rule"],
        sieve=sieve,
        sector_labels=arrays.get("sector_labels"),
    )
