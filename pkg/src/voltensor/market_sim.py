"""Synthetic high-frequency market generator with a known factor structure.

Each day l has a true integrated volatility matrix Gamma_l = Psi_l + Sigma:
a rank-r1 factor part Psi_l = sum_k v_{l,k} Q F_k Q' whose time loadings v
follow a HAR(1, 5, 21) recursion, plus a time-constant sparse idiosyncratic
matrix Sigma.  Intraday log prices diffuse with covariance Gamma_l, jump at
Poisson times, and are observed with additive microstructure noise.  The
generator also assembles the covariates used for conditional prediction
(daily/weekly/monthly averages of realized top eigenvalues) with a 21-day
lead-in so every returned day has full history.

All randomness flows from one master seed through named SeedSequence spawns
(truth first, then one child per day), so outputs are bit-identical across
runs and day simulation could be parallelized without changing results.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from voltensor.ptpoet import har_covariates
from voltensor.realized_vol import IntradayPanel, PrvmConfig, prvm
from voltensor.tensor_core import VolTensor, fix_signs

PAPER_HAR_PARAMS = (0.5, 0.372, 0.343, 0.224)

# days of realized-eigenvalue history needed before the first usable covariate
COVARIATE_WARMUP = 21

# negative HAR draws (rare: the stationary mean is ~8.2, sd ~2.5) would make
# the factor slice indefinite; loadings are floored here when truth is built
LOADING_FLOOR = 1e-3


@dataclass
class SimConfig:
    p: int = 50
    D: int = 100
    m: int = 2000
    r1: int = 3
    r2: int = 1
    har_params: tuple[float, float, float, float] = PAPER_HAR_PARAMS
    jump_intensity: float = 5.0
    jump_size_scale: float = 0.05
    noise_scale: float = 0.01
    gamma_shape: float = 100.0
    gamma_rate: float = 100.0
    sparse_prob_scale: float = 0.3
    seed: int = 0
    burn_in_days: int = 105

    def __post_init__(self):
        if min(self.p, self.D, self.m, self.r1, self.r2) < 1:
            raise ValueError("p, D, m, r1, r2 must all be at least 1")
        if self.r1 > self.p:
            raise ValueError(f"r1={self.r1} exceeds p={self.p}")
        if self.r2 > self.D:
            raise ValueError(f"r2={self.r2} exceeds D={self.D}")
        if len(self.har_params) != 4:
            raise ValueError("har_params must be (b0, b1, b2, b3)")
        for name in ("jump_intensity", "jump_size_scale", "noise_scale",
                     "gamma_shape", "gamma_rate", "sparse_prob_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.burn_in_days < COVARIATE_WARMUP:
            raise ValueError(f"burn_in_days must be at least {COVARIATE_WARMUP}")


@dataclass
class SimTruth:
    """Ground-truth model pieces for a stretch of simulated days."""

    loading_q: np.ndarray        # (p, r1)
    core: np.ndarray             # (r1, r1, r2), diagonal frontal slices
    components: np.ndarray       # (r2, p, p), C_k = Q diag(core_k) Q'
    loadings: np.ndarray         # (n_days, r2), floored
    loadings_raw: np.ndarray     # (n_days, r2), before the floor
    idio: np.ndarray             # (p, p)
    n_floored: int
    har_params: tuple = PAPER_HAR_PARAMS

    @property
    def n_days(self) -> int:
        return self.loadings.shape[0]

    def factor_slice(self, l: int) -> np.ndarray:
        return np.einsum("k,kij->ij", self.loadings[l], self.components)

    def gamma_slice(self, l: int) -> np.ndarray:
        return self.factor_slice(l) + self.idio

    def conditional_mean_loadings(self, l: int) -> np.ndarray:
        """E[v_l | loading history through day l-1], per component, floored."""
        if l < 21:
            raise ValueError("conditional mean needs 21 trailing days")
        means = np.array([
            har_conditional_mean(self.loadings_raw[l - 21 : l, k], self.har_params)
            for k in range(self.loadings_raw.shape[1])
        ])
        return np.maximum(means, LOADING_FLOOR)

    def conditional_gamma_slice(self, l: int) -> np.ndarray:
        """Conditional expected volatility matrix for day l given days < l."""
        v_bar = self.conditional_mean_loadings(l)
        return np.einsum("k,kij->ij", v_bar, self.components) + self.idio


@dataclass
class SimOutput:
    """One simulated study: D data days plus the day-D+1 target."""

    panels: list
    true_tensor: VolTensor
    true_factor_tensor: VolTensor
    true_idio: VolTensor
    covariates_X: np.ndarray
    next_day_truth: np.ndarray
    x_next: np.ndarray
    next_day_panel: IntradayPanel
    realized_tensor: VolTensor
    n_floored_loadings: int


def is_positive_definite(mat: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(mat)
        return True
    except np.linalg.LinAlgError:
        return False


def assemble_sparse_idio(d: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Sigma = diag(d^2) + s s' - diag(s^2); diagonal is exactly d^2."""
    d = np.asarray(d, dtype=float)
    s = np.asarray(s, dtype=float)
    return np.diag(d**2) + np.outer(s, s) - np.diag(s**2)


def generate_sparse_idio(
    p: int,
    gamma_shape: float = 100.0,
    gamma_rate: float = 100.0,
    sparse_prob_scale: float = 0.3,
    rng=None,
    retry_budget: int = 1000,
) -> np.ndarray:
    """Draw a sparse PD idiosyncratic covariance matrix.

    Diagonal entries are squared Gamma(shape, rate) draws; each off-diagonal
    loading s_i is standard normal with probability
    sparse_prob_scale / (sqrt(p) log p), else zero.  Draws are repeated until
    the assembled matrix is positive definite.
    """
    rng = np.random.default_rng(rng)
    if sparse_prob_scale == 0 or p == 1:
        prob = 0.0
    else:
        prob = min(1.0, sparse_prob_scale / (np.sqrt(p) * np.log(p)))
    for _ in range(retry_budget):
        d = rng.gamma(shape=gamma_shape, scale=1.0 / gamma_rate, size=p)
        s = rng.standard_normal(p) * (rng.random(p) < prob)
        sigma = assemble_sparse_idio(d, s)
        if is_positive_definite(sigma):
            return sigma
    raise RuntimeError(
        f"no positive definite draw within the retry budget of {retry_budget}"
    )


def simulate_har_loadings(
    n_days: int,
    har_params=PAPER_HAR_PARAMS,
    burn_in: int = 105,
    rng=None,
    noise_sd: float = 1.0,
) -> np.ndarray:
    """HAR(1, 5, 21) recursion, burn-in discarded.

    v_l = b0 + b1 v_{l-1} + b2 mean(v_{l-5..l-1}) + b3 mean(v_{l-21..l-1}) + z_l
    with z_l ~ N(0, noise_sd^2) drawn independently across days.
    """
    b0, b1, b2, b3 = har_params
    if b1 + b2 + b3 >= 1.0:
        raise ValueError(
            f"non-stationary HAR parameters: b1+b2+b3 = {b1 + b2 + b3:.3f} >= 1"
        )
    if burn_in < 21:
        raise ValueError("burn_in must be at least 21")
    rng = np.random.default_rng(rng)
    hist = np.full(21, b0)
    out = np.empty(burn_in + n_days)
    for t in range(burn_in + n_days):
        shock = noise_sd * rng.standard_normal() if noise_sd > 0 else 0.0
        v = b0 + b1 * hist[-1] + b2 * hist[-5:].mean() + b3 * hist.mean() + shock
        out[t] = v
        hist = np.roll(hist, -1)
        hist[-1] = v
    return out[burn_in:]


def har_conditional_mean(history: np.ndarray, har_params=PAPER_HAR_PARAMS) -> float:
    """One-step-ahead conditional mean of the HAR recursion.

    history holds the series up to and including the previous day; at least
    the last 21 values must be present.
    """
    history = np.asarray(history, dtype=float)
    if history.shape[-1] < 21:
        raise ValueError("need at least 21 trailing values for the monthly term")
    b0, b1, b2, b3 = har_params
    h = history[-21:]
    return b0 + b1 * h[-1] + b2 * h[-5:].mean() + b3 * h.mean()


def _psd_sqrt(mat: np.ndarray, name: str) -> np.ndarray:
    w, vecs = np.linalg.eigh(mat)
    tol = 1e-10 * max(abs(w[0]), abs(w[-1]), 1.0)
    if w[0] < -tol:
        raise ValueError(f"{name} is not PSD (min eigenvalue {w[0]:.3e})")
    return vecs * np.sqrt(np.clip(w, 0.0, None))


def _draw_jumps(rng, intensity: float, m: int, jump_sd: np.ndarray):
    """Poisson jump increments on the intraday grid.

    Returns (counts, increments): per-asset jump counts and the (m, p) array
    of summed jump sizes per grid interval.
    """
    p = jump_sd.size
    increments = np.zeros((m, p))
    counts = rng.poisson(intensity, size=p)
    for i in range(p):
        k = counts[i]
        if k == 0:
            continue
        slots = rng.integers(0, m, size=k)
        sizes = rng.standard_normal(k) * jump_sd[i]
        np.add.at(increments[:, i], slots, sizes)
    return counts, increments


def simulate_day_prices(
    psi: np.ndarray,
    sigma: np.ndarray,
    m: int,
    rng=None,
    jump_intensity: float = 5.0,
    jump_size_scale: float = 0.05,
    noise_scale: float = 0.01,
    day_index: int = 0,
) -> IntradayPanel:
    """One day of noisy log prices on the grid t_j = j/m.

    The diffusion uses the eigenvalue square root of the (possibly
    rank-deficient) factor covariance ``psi`` and the Cholesky factor of the
    idiosyncratic covariance ``sigma``.  Jump sizes scale with the day's true
    total variance, observation noise with the idiosyncratic variance.
    """
    rng = np.random.default_rng(rng)
    psi = np.asarray(psi, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    p = psi.shape[0]
    factor_sqrt = _psd_sqrt(psi, "factor covariance")
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        # rank-deficient but PSD (e.g. a riskless asset) is fine; only
        # genuinely indefinite matrices are rejected
        chol = _psd_sqrt(sigma, "idiosyncratic covariance")

    dt_sqrt = 1.0 / np.sqrt(m)
    diffusion = (
        rng.standard_normal((m, p)) @ factor_sqrt.T
        + rng.standard_normal((m, p)) @ chol.T
    ) * dt_sqrt

    if jump_intensity > 0:
        gamma_diag = np.diag(psi) + np.diag(sigma)
        jump_sd = jump_size_scale * np.sqrt(gamma_diag)
        _, jumps = _draw_jumps(rng, jump_intensity, m, jump_sd)
        diffusion = diffusion + jumps

    x = np.vstack([np.zeros(p), np.cumsum(diffusion, axis=0)])
    if noise_scale > 0:
        noise_sd = noise_scale * np.sqrt(np.diag(sigma))
        x = x + rng.standard_normal((m + 1, p)) * noise_sd
    return IntradayPanel(day_index=day_index, times=np.arange(m + 1), log_prices=x)


def build_truth(cfg: SimConfig, n_days: int, rng) -> SimTruth:
    """Factor structure, HAR loadings, and idiosyncratic matrix for n_days."""
    p, r1, r2 = cfg.p, cfg.r1, cfg.r2
    a = rng.standard_normal((p, p))
    w, vecs = np.linalg.eigh(a @ a.T)
    q = fix_signs(vecs[:, ::-1][:, :r1])
    eigs = [w[::-1][:r1].copy()]
    for _ in range(1, r2):
        b = rng.standard_normal((p, p))
        wb = np.linalg.eigvalsh(b @ b.T)
        eigs.append(wb[::-1][:r1].copy())
    core = np.zeros((r1, r1, r2))
    components = np.empty((r2, p, p))
    for k in range(r2):
        core[:, :, k] = np.diag(eigs[k])
        components[k] = (q * eigs[k]) @ q.T

    raw = np.column_stack(
        [
            simulate_har_loadings(n_days, cfg.har_params, cfg.burn_in_days, rng)
            for _ in range(r2)
        ]
    )
    loadings = np.maximum(raw, LOADING_FLOOR)
    n_floored = int(np.sum(raw < LOADING_FLOOR))

    idio = generate_sparse_idio(
        p, cfg.gamma_shape, cfg.gamma_rate, cfg.sparse_prob_scale, rng
    )
    return SimTruth(
        loading_q=q,
        core=core,
        components=components,
        loadings=loadings,
        loadings_raw=raw,
        idio=idio,
        n_floored=n_floored,
        har_params=tuple(cfg.har_params),
    )


def simulate_paths(cfg: SimConfig, n_days: int) -> tuple[SimTruth, list[IntradayPanel]]:
    """Truth plus one intraday panel per day, with per-day child seeds."""
    ss = np.random.SeedSequence(cfg.seed)
    children = ss.spawn(n_days + 1)
    truth = build_truth(cfg, n_days, np.random.default_rng(children[0]))
    panels = [
        simulate_day_prices(
            truth.factor_slice(l),
            truth.idio,
            cfg.m,
            rng=np.random.default_rng(children[l + 1]),
            jump_intensity=cfg.jump_intensity,
            jump_size_scale=cfg.jump_size_scale,
            noise_scale=cfg.noise_scale,
            day_index=l,
        )
        for l in range(n_days)
    ]
    return truth, panels


def simulate_study(cfg: SimConfig, prvm_cfg: PrvmConfig | None = None) -> SimOutput:
    """Full study: D data days, covariates, and the day-D+1 target.

    21 lead-in days are simulated ahead of day 1 so that every returned day
    has complete daily/weekly/monthly realized-eigenvalue covariates; the
    lead-in panels are used only for that history.  The exported target is
    the conditional expected volatility matrix for day D+1 given the loading
    history through day D (the day-D+1 shock itself is unforecastable), while
    the day-D+1 panel is simulated from the realized loading.
    """
    warm = COVARIATE_WARMUP
    n_days = warm + cfg.D + 1
    truth, panels = simulate_paths(cfg, n_days)

    est = [prvm(panels[l], prvm_cfg) for l in range(n_days - 1)]
    top_eigs = np.array([np.linalg.eigvalsh(g)[-cfg.r1 :].mean() for g in est])
    # row t of the covariate matrix is aligned with series day warm + t, so
    # the rows cover exactly the D data days and x_next the day-D+1 target
    covariates, x_next = har_covariates(top_eigs)

    factor_slices = [truth.factor_slice(l) for l in range(warm, warm + cfg.D)]
    gamma_slices = [f + truth.idio for f in factor_slices]
    data_panels = []
    for new_index, l in enumerate(range(warm, warm + cfg.D)):
        panel = panels[l]
        data_panels.append(
            IntradayPanel(day_index=new_index, times=panel.times, log_prices=panel.log_prices)
        )
    next_panel = panels[warm + cfg.D]
    next_panel = IntradayPanel(
        day_index=cfg.D, times=next_panel.times, log_prices=next_panel.log_prices
    )

    return SimOutput(
        panels=data_panels,
        true_tensor=VolTensor.from_slices(gamma_slices),
        true_factor_tensor=VolTensor.from_slices(factor_slices),
        true_idio=VolTensor.from_slices([truth.idio] * cfg.D),
        covariates_X=covariates,
        next_day_truth=truth.conditional_gamma_slice(warm + cfg.D),
        x_next=x_next,
        next_day_panel=next_panel,
        realized_tensor=VolTensor.from_slices(est[warm : warm + cfg.D]),
        n_floored_loadings=truth.n_floored,
    )


def subsample_panel(panel: IntradayPanel, factor: int) -> IntradayPanel:
    """Keep every factor-th observation (coarser sampling of the same day)."""
    if factor == 1:
        return panel
    if panel.m % factor != 0:
        raise ValueError(f"m={panel.m} is not divisible by {factor}")
    keep = np.arange(0, panel.m + 1, factor)
    return IntradayPanel(
        day_index=panel.day_index,
        times=np.arange(keep.size),
        log_prices=panel.log_prices[keep],
    )


# ---------------------------------------------------------------------------
# study serialization (per-day panel CSVs, truth tensors, covariates, manifest)


def write_panel_csv(panel: IntradayPanel, path) -> None:
    p = panel.p
    frame = pd.DataFrame(
        panel.log_prices, columns=[f"asset_{i + 1}" for i in range(p)]
    )
    frame.insert(0, "t", panel.times)
    frame.to_csv(path, index=False)


def write_study_dir(out_dir, sim: SimOutput, cfg: SimConfig) -> None:
    """Lay a simulated study out on disk; see the manifest for the map."""
    out = Path(out_dir)
    (out / "panels").mkdir(parents=True, exist_ok=True)
    for panel in sim.panels:
        write_panel_csv(panel, out / "panels" / f"panel_{panel.day_index:04d}.csv")
    write_panel_csv(sim.next_day_panel, out / "panels" / "panel_next.csv")

    sim.true_tensor.save(out / "truth_gamma")
    sim.true_factor_tensor.save(out / "truth_factor")
    sim.true_idio.save(out / "truth_idio")
    np.savetxt(out / "next_day_truth.csv", sim.next_day_truth, delimiter=",", fmt="%.17g")

    rows = np.vstack([sim.covariates_X, sim.x_next[None, :]])
    frame = pd.DataFrame(rows, columns=["x_daily", "x_weekly", "x_monthly"])
    frame.insert(0, "day", np.arange(rows.shape[0]))
    frame.to_csv(out / "covariates.csv", index=False)

    manifest = {
        "format_version": 1,
        "kind": "simulated-study",
        "config": {
            "p": cfg.p, "D": cfg.D, "m": cfg.m, "r1": cfg.r1, "r2": cfg.r2,
            "har_params": list(cfg.har_params),
            "jump_intensity": cfg.jump_intensity,
            "jump_size_scale": cfg.jump_size_scale,
            "noise_scale": cfg.noise_scale,
            "gamma_shape": cfg.gamma_shape,
            "gamma_rate": cfg.gamma_rate,
            "sparse_prob_scale": cfg.sparse_prob_scale,
            "seed": cfg.seed,
            "burn_in_days": cfg.burn_in_days,
        },
        "n_floored_loadings": sim.n_floored_loadings,
        "files": {
            "panels": [f"panels/panel_{i:04d}.csv" for i in range(cfg.D)],
            "next_day_panel": "panels/panel_next.csv",
            "truth_gamma": "truth_gamma.json",
            "truth_factor": "truth_factor.json",
            "truth_idio": "truth_idio.json",
            "next_day_truth": "next_day_truth.csv",
            "covariates": "covariates.csv",
        },
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
