import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voltensor.baselines import (
    METHODS,
    BaselineSpec,
    ar_one_step,
    fit_ar,
    fit_har,
    har_one_step,
    predict_fivar,
    predict_poet,
    predict_prvm_last,
    spectral_truncate,
)
from voltensor.market_sim import SimConfig, simulate_har_loadings, simulate_paths
from voltensor.ptpoet import adaptive_threshold
from voltensor.realized_vol import prvm


def random_psd_tensor(rng, p, n_days, base_rank=None):
    slices = []
    for _ in range(n_days):
        a = rng.standard_normal((p, base_rank or p))
        slices.append(a @ a.T / p)
    return np.stack(slices, axis=2)


class TestBaselineSpec:
    def test_known_methods(self):
        assert BaselineSpec("FIVAR").method == "FIVAR"
        with pytest.raises(ValueError, match="method must be one of"):
            BaselineSpec("GARCH")

    def test_parameter_guards(self):
        with pytest.raises(ValueError, match="r1 must be positive"):
            BaselineSpec("POET", r1=0)
        with pytest.raises(ValueError, match="tau must be nonnegative"):
            BaselineSpec("POET", tau=-0.1)
        with pytest.raises(ValueError, match="windows must be positive"):
            BaselineSpec("FIVAR", eigvec_window=0)
        with pytest.raises(ValueError, match="ar_lag must be positive"):
            BaselineSpec("FIVAR", ar_lag=0)


class TestPrvmLast:
    def test_single_day_window(self):
        y = np.arange(4.0).reshape(2, 2, 1)
        np.testing.assert_array_equal(predict_prvm_last(y), y[:, :, 0])

    def test_returns_a_copy(self):
        y = np.ones((2, 2, 3))
        pred = predict_prvm_last(y)
        pred[0, 0] = 99.0
        assert y[0, 0, 2] == 1.0

    def test_constant_window(self):
        mat = np.array([[2.0, 0.5], [0.5, 1.0]])
        y = np.repeat(mat[:, :, None], 5, axis=2)
        np.testing.assert_array_equal(predict_prvm_last(y), mat)

    def test_shape_validation(self):
        with pytest.raises(ValueError, match="p x p x D"):
            predict_prvm_last(np.ones((3, 3)))


class TestSpectralTruncate:
    def test_keeps_leading_eigenvalue(self):
        np.testing.assert_allclose(
            spectral_truncate(np.diag([5.0, 1.0, 0.1]), 1),
            np.diag([5.0, 0.0, 0.0]),
            atol=1e-12,
        )

    def test_full_rank_is_identity(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((4, 4))
        mat = a @ a.T
        np.testing.assert_allclose(spectral_truncate(mat, 4), mat, atol=1e-10)

    def test_output_rank(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((6, 6))
        out = spectral_truncate(a @ a.T, 2)
        w = np.linalg.eigvalsh(out)
        assert np.sum(np.abs(w) > 1e-8) == 2

    def test_rank_bounds(self):
        with pytest.raises(ValueError, match=r"r1 must be in \[1, 3\]"):
            spectral_truncate(np.eye(3), 0)
        with pytest.raises(ValueError, match=r"r1 must be in \[1, 3\]"):
            spectral_truncate(np.eye(3), 4)


class TestPoet:
    def test_full_rank_zero_tau_returns_input(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((5, 5))
        mat = a @ a.T
        np.testing.assert_allclose(predict_poet(mat, 5, 0.0), mat, atol=1e-10)

    def test_large_tau_keeps_low_rank_plus_diagonal(self):
        # strictly PD input: the residual diagonal stays positive, so the
        # entry-level thresholds are all huge and only the diagonal survives
        rng = np.random.default_rng(1)
        a = rng.standard_normal((6, 2))
        mat = a @ a.T + np.diag(rng.uniform(0.5, 1.5, 6))
        low_rank = spectral_truncate(mat, 2)
        resid_diag = np.diag(mat - low_rank)
        assert np.all(resid_diag > 0)
        pred = predict_poet(mat, 2, 1e6)
        np.testing.assert_allclose(pred, low_rank + np.diag(resid_diag), atol=1e-10)

    def test_threshold_matches_shared_kernel(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((5, 5))
        mat = a @ a.T
        low_rank = spectral_truncate(mat, 2)
        expected = low_rank + adaptive_threshold(mat - low_rank, 0.4, "hard")
        np.testing.assert_allclose(
            predict_poet(mat, 2, 0.4, rule="hard"), expected, atol=1e-12
        )


class TestEigenvalueDynamics:
    def test_ar_recovers_oscillating_recursion(self):
        # noise-free AR(1) with negative coefficient keeps oscillating, so
        # the design stays well conditioned and least squares is exact
        series = np.empty(30)
        series[0] = 5.0
        for t in range(1, 30):
            series[t] = 1.0 - 0.9 * series[t - 1]
        coefs = fit_ar(series, 1)
        np.testing.assert_allclose(coefs, [1.0, -0.9], atol=1e-8)
        assert ar_one_step(series, coefs) == pytest.approx(
            1.0 - 0.9 * series[-1], abs=1e-8
        )

    def test_unit_root_coefficients_give_random_walk(self):
        series = np.array([3.0, 1.0, 4.0, 1.5])
        assert ar_one_step(series, np.array([0.0, 1.0])) == 1.5

    def test_ar_validation(self):
        with pytest.raises(ValueError, match="at least 3 observations"):
            fit_ar(np.ones(2), 1)
        with pytest.raises(ValueError, match="need 2 trailing values"):
            ar_one_step(np.ones(1), np.array([0.0, 0.5, 0.5]))

    def test_har_design_matches_loop_construction(self):
        rng = np.random.default_rng(0)
        series = rng.standard_normal(60).cumsum() + 10.0
        n = series.size
        rows, targets = [], []
        for t in range(21, n):
            rows.append(
                [1.0, series[t - 1], series[t - 5 : t].mean(), series[t - 21 : t].mean()]
            )
            targets.append(series[t])
        expected, *_ = np.linalg.lstsq(np.array(rows), np.array(targets), rcond=None)
        np.testing.assert_allclose(fit_har(series), expected, atol=1e-10)

    def test_har_recovers_simulated_coefficients(self):
        series = simulate_har_loadings(3000, rng=np.random.default_rng(1))
        coefs = fit_har(series)
        np.testing.assert_allclose(
            coefs, [0.5, 0.372, 0.343, 0.224], atol=0.12
        )

    def test_har_one_step_formula(self):
        series = np.arange(25.0)
        coefs = np.array([0.5, 0.2, 0.1, 0.05])
        expected = 0.5 + 0.2 * series[-1] + 0.1 * series[-5:].mean() + 0.05 * series[-21:].mean()
        assert har_one_step(series, coefs) == pytest.approx(expected, rel=1e-12)

    def test_har_validation(self):
        with pytest.raises(ValueError, match="at least 23 observations"):
            fit_har(np.ones(22))
        with pytest.raises(ValueError, match="at least 21 trailing"):
            har_one_step(np.ones(20), np.zeros(4))

    @pytest.mark.slow
    def test_har_eigenvalue_forecasts_beat_random_walk(self):
        # forecasting the realized leading eigenvalues one day ahead: the
        # HAR fit beats carrying the last value forward for almost every
        # seed because the eigenvalue series is strongly mean reverting
        har_mse, rw_mse = [], []
        for seed in range(20):
            cfg = SimConfig(p=20, D=100, m=500, seed=seed)
            n_days = 21 + 100 + 20
            _, panels = simulate_paths(cfg, n_days)
            eigs = np.stack(
                [np.linalg.eigvalsh(prvm(panel))[-3:] for panel in panels]
            )
            errs_h, errs_rw = [], []
            for tgt in range(n_days - 20, n_days):
                for k in range(3):
                    series = eigs[tgt - 100 : tgt, k]
                    fc = max(har_one_step(series, fit_har(series)), 0.0)
                    errs_h.append((fc - eigs[tgt, k]) ** 2)
                    errs_rw.append((series[-1] - eigs[tgt, k]) ** 2)
            har_mse.append(np.mean(errs_h))
            rw_mse.append(np.mean(errs_rw))
        assert np.median(har_mse) < np.median(rw_mse)
        assert int(np.sum(np.array(har_mse) < np.array(rw_mse))) >= 15


class TestFivar:
    def test_constant_window_reproduces_slice(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 3))
        mat = a @ a.T
        y = np.repeat(mat[:, :, None], 30, axis=2)
        for method in ("FIVAR", "FIVAR_H"):
            spec = BaselineSpec(method, r1=3, tau=0.0, param_window=30)
            np.testing.assert_allclose(
                predict_fivar(y, spec), mat, atol=1e-8
            )

    def test_parameter_window_shrinks_with_warning(self):
        rng = np.random.default_rng(1)
        y = random_psd_tensor(rng, 4, 25)
        spec = BaselineSpec("FIVAR", r1=2, tau=0.1)
        with pytest.warns(UserWarning, match="parameter window 252 shrunk to the 25"):
            predict_fivar(y, spec)

    def test_method_guard(self):
        y = random_psd_tensor(np.random.default_rng(2), 4, 25)
        with pytest.raises(ValueError, match="must be FIVAR or FIVAR_H"):
            predict_fivar(y, BaselineSpec("POET"))

    def test_window_and_rank_guards(self):
        rng = np.random.default_rng(3)
        short = random_psd_tensor(rng, 4, 10)
        spec = BaselineSpec("FIVAR", r1=2, param_window=10)
        with pytest.raises(ValueError, match="need at least eigvec_window = 21"):
            predict_fivar(short, spec)
        y = random_psd_tensor(rng, 4, 25)
        with pytest.raises(ValueError, match="r1 = 5 exceeds p = 4"):
            predict_fivar(y, BaselineSpec("FIVAR", r1=5, param_window=25))

    def test_eigenvector_basis_is_orthonormal(self):
        rng = np.random.default_rng(4)
        y = random_psd_tensor(rng, 5, 30)
        avg = y[:, :, -21:].mean(axis=2)
        _, v = np.linalg.eigh(avg)
        xi = v[:, -3:][:, ::-1]
        assert np.max(np.abs(xi.T @ xi - np.eye(3))) < 1e-8

    @given(st.integers(0, 500))
    @settings(max_examples=10, deadline=None)
    def test_predictions_are_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        y = random_psd_tensor(rng, 4, 25)
        spec = BaselineSpec("FIVAR", r1=2, tau=0.3, param_window=25)
        pred = predict_fivar(y, spec)
        np.testing.assert_allclose(pred, pred.T, atol=1e-14)
        poet = predict_poet(y[:, :, -1], 2, 0.3)
        np.testing.assert_allclose(poet, poet.T, atol=1e-14)


class TestForecastOrderings:
    @pytest.mark.slow
    def test_last_value_carries_the_most_error(self, mini_study):
        mspe = mini_study["mspe"]
        assert np.median(mspe["ptpoet"]) < np.median(mspe["prvm"])

    @pytest.mark.slow
    def test_single_day_truncation_sits_between(self, mini_study):
        mspe = mini_study["mspe"]
        assert np.median(mspe["ptpoet"]) < np.median(mspe["poet"])
        assert np.median(mspe["poet"]) < np.median(mspe["prvm"])
