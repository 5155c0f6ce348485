import csv
import json

import numpy as np
import pytest
from scipy.optimize import minimize

from voltensor.evaluation import (
    LossSeries,
    dm_test,
    mspe,
    norm_errors,
    qlike,
    write_dm_matrix,
    write_results_table,
)


def spectral_norm_power_iteration(delta, n_iter=500):
    """Largest singular value via power iteration on delta' delta."""
    v = np.ones(delta.shape[1]) / np.sqrt(delta.shape[1])
    sq = delta.T @ delta
    for _ in range(n_iter):
        v = sq @ v
        v /= np.linalg.norm(v)
    return float(np.sqrt(v @ sq @ v))


def random_pd(rng, p, ridge=0.5):
    a = rng.standard_normal((p, p))
    return a @ a.T / p + ridge * np.eye(p)


class TestLossSeries:
    def test_stores_float_array(self):
        series = LossSeries("prvm", [1, 2, 3])
        assert series.losses.dtype == float
        assert series.method == "prvm"

    def test_validation(self):
        with pytest.raises(ValueError, match="one-dimensional"):
            LossSeries("m", np.ones((2, 2)))
        with pytest.raises(ValueError, match="finite"):
            LossSeries("m", [1.0, np.nan])


class TestNormErrors:
    def test_zero_error_at_truth(self):
        truth = random_pd(np.random.default_rng(0), 4)
        out = norm_errors(truth, truth)
        for key in ("frobenius", "max", "spectral", "relative_frobenius"):
            assert out[key] == 0.0

    def test_rank_one_unit_perturbation_of_identity(self):
        p = 5
        pred = np.eye(p) + np.diag([1.0, 0, 0, 0, 0])
        out = norm_errors(pred, np.eye(p))
        assert out["frobenius"] == pytest.approx(1.0, abs=1e-14)
        assert out["max"] == pytest.approx(1.0, abs=1e-14)
        assert out["spectral"] == pytest.approx(1.0, abs=1e-12)
        assert out["relative_frobenius"] == pytest.approx(1.0 / np.sqrt(p), abs=1e-12)

    def test_spectral_matches_power_iteration(self):
        rng = np.random.default_rng(1)
        pred = random_pd(rng, 5)
        truth = random_pd(rng, 5)
        out = norm_errors(pred, truth)
        ref = spectral_norm_power_iteration(pred - truth)
        assert out["spectral"] == pytest.approx(ref, abs=1e-8)

    def test_identity_truth_reduces_relative_to_frobenius(self):
        rng = np.random.default_rng(2)
        pred = random_pd(rng, 6)
        out = norm_errors(pred, np.eye(6))
        assert out["relative_frobenius"] == pytest.approx(
            out["frobenius"] / np.sqrt(6.0), rel=1e-12
        )

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        pred = random_pd(rng, 5)
        truth = random_pd(rng, 5)
        perm = np.eye(5)[rng.permutation(5)]
        base = norm_errors(pred, truth)
        permuted = norm_errors(perm @ pred @ perm.T, perm @ truth @ perm.T)
        for key in ("frobenius", "max", "spectral", "relative_frobenius"):
            assert permuted[key] == pytest.approx(base[key], rel=1e-9)

    def test_indefinite_truth_reports_reason(self):
        out = norm_errors(np.eye(2), np.diag([1.0, -1.0]))
        assert out["relative_frobenius"] is None
        assert "not positive definite" in out["relative_frobenius_reason"]
        assert out["frobenius"] == pytest.approx(2.0)

    def test_shape_validation(self):
        with pytest.raises(ValueError, match="matching square"):
            norm_errors(np.ones((2, 3)), np.ones((2, 3)))
        with pytest.raises(ValueError, match="matching square"):
            norm_errors(np.eye(2), np.eye(3))


class TestMspe:
    def test_zero_at_proxies(self):
        rng = np.random.default_rng(0)
        mats = [random_pd(rng, 3) for _ in range(4)]
        assert mspe(mats, mats) == 0.0

    def test_identity_difference(self):
        assert mspe([2.0 * np.eye(3)], [np.eye(3)]) == pytest.approx(3.0)

    def test_symmetric_in_arguments(self):
        rng = np.random.default_rng(1)
        a = [random_pd(rng, 4) for _ in range(3)]
        b = [random_pd(rng, 4) for _ in range(3)]
        assert mspe(a, b) == pytest.approx(mspe(b, a), rel=1e-14)

    def test_validation(self):
        with pytest.raises(ValueError, match="2 predictions vs 1 proxies"):
            mspe([np.eye(2), np.eye(2)], [np.eye(2)])
        with pytest.raises(ValueError, match="empty series"):
            mspe([], [])

    @pytest.mark.slow
    def test_projected_model_beats_single_day_truncation(self, mini_study):
        mspe_by_method = mini_study["mspe"]
        assert np.median(mspe_by_method["ptpoet"]) < np.median(
            mspe_by_method["poet"]
        )


class TestQlike:
    def test_identity_pair_scores_dimension(self):
        loss, excluded = qlike([np.eye(3)], [np.eye(3)])
        assert loss == pytest.approx(3.0, abs=1e-12)
        assert excluded == 0

    def test_double_identity_closed_form(self):
        # log det(2I) + tr((2I)^-1 I) = 2 log 2 + 1 in dimension 2
        loss, _ = qlike([2.0 * np.eye(2)], [np.eye(2)])
        assert loss == pytest.approx(2.0 * np.log(2.0) + 1.0, abs=1e-12)

    def test_minimized_at_the_proxy(self):
        rng = np.random.default_rng(0)
        proxy = random_pd(rng, 3)
        at_proxy, _ = qlike([proxy], [proxy])
        sign, logdet = np.linalg.slogdet(proxy)
        assert sign > 0 and at_proxy == pytest.approx(logdet + 3.0, abs=1e-10)
        # numerical minimization over a Cholesky parametrization lands on
        # the proxy itself
        tril = np.tril_indices(3)

        def loss_of(params):
            chol = np.zeros((3, 3))
            chol[tril] = params
            pred = chol @ chol.T + 1e-10 * np.eye(3)
            return qlike([pred], [proxy])[0]

        start = np.linalg.cholesky(proxy + 0.5 * np.eye(3))[tril]
        res = minimize(loss_of, start, method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20_000})
        assert res.fun >= at_proxy - 1e-9
        assert res.fun - at_proxy < 1e-6
        for _ in range(20):
            bump = rng.standard_normal((3, 3)) * 0.05
            pred = proxy + bump @ bump.T
            assert qlike([pred], [proxy])[0] > at_proxy

    def test_asymmetric_in_arguments(self):
        a = 2.0 * np.eye(2)
        b = np.eye(2)
        assert qlike([a], [b])[0] != pytest.approx(qlike([b], [a])[0])

    def test_ill_conditioned_days_are_excluded(self):
        good = np.eye(2)
        indefinite = np.diag([1.0, -1.0])
        near_singular = np.diag([1.0, 1e-13])
        loss, excluded = qlike(
            [good, indefinite, near_singular], [np.eye(2)] * 3
        )
        assert excluded == 2
        assert loss == pytest.approx(2.0, abs=1e-12)

    def test_all_excluded_raises(self):
        with pytest.raises(ValueError, match="all days excluded"):
            qlike([np.diag([1.0, -1.0])], [np.eye(2)])

    def test_length_validation(self):
        with pytest.raises(ValueError, match="1 predictions vs 2"):
            qlike([np.eye(2)], [np.eye(2), np.eye(2)])
        with pytest.raises(ValueError, match="empty series"):
            qlike([], [])


class TestDmTest:
    def test_identical_series_degenerate(self):
        losses = np.ones(50)
        out = dm_test(losses, losses)
        assert out["degenerate"] is True
        assert out["statistic"] is None
        assert out["p_value"] == 1.0

    def test_large_signal_gives_large_statistic(self):
        # mean 1, standard error about 0.1 / sqrt(100): the statistic
        # should sit near 100
        rng = np.random.default_rng(0)
        a = 1.0 + 0.1 * rng.standard_normal(100)
        b = np.zeros(100)
        out = dm_test(a, b)
        assert 70.0 < out["statistic"] < 130.0
        assert out["p_value"] < 1e-10

    def test_antisymmetric(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal(60) + 0.3
        b = rng.standard_normal(60)
        fwd = dm_test(a, b)
        rev = dm_test(b, a)
        assert fwd["statistic"] == pytest.approx(-rev["statistic"], rel=1e-12)
        assert fwd["p_value"] == pytest.approx(rev["p_value"], rel=1e-12)

    def test_accepts_loss_series_wrapper(self):
        rng = np.random.default_rng(3)
        a = LossSeries("a", rng.standard_normal(30) + 1.0)
        b = LossSeries("b", rng.standard_normal(30))
        assert dm_test(a, b)["p_value"] == dm_test(a.losses, b.losses)["p_value"]

    def test_validation(self):
        with pytest.raises(ValueError, match="lengths differ"):
            dm_test(np.ones(10), np.ones(11))
        with pytest.raises(ValueError, match="at least 10"):
            dm_test(np.ones(5), np.zeros(5))
        with pytest.raises(ValueError, match="hac_lags"):
            dm_test(np.arange(20.0), np.zeros(20), hac_lags=20)
        with pytest.raises(ValueError, match="hac_lags"):
            dm_test(np.arange(20.0), np.zeros(20), hac_lags=-1)

    def test_size_under_the_null(self):
        # iid differences with zero mean: the two-sided 5% test should
        # reject at close to its nominal rate
        rng = np.random.default_rng(0)
        rejections = 0
        reps = 10_000
        for _ in range(reps):
            d = rng.standard_normal(200)
            if dm_test(d, np.zeros(200))["p_value"] < 0.05:
                rejections += 1
        assert 0.035 <= rejections / reps <= 0.065


class TestTables:
    def test_results_table_round_trip(self, tmp_path):
        records = [
            {"method": "ptpoet", "period": "full", "metric": "frobenius",
             "value": 1.25},
            {"method": "prvm", "period": "full", "metric": "frobenius",
             "value": 3.5},
        ]
        csv_path = tmp_path / "results.csv"
        json_path = tmp_path / "results.json"
        write_results_table(records, csv_path, json_path)
        with csv_path.open() as fh:
            rows = list(csv.DictReader(fh))
        assert rows[0]["method"] == "ptpoet"
        assert float(rows[1]["value"]) == 3.5
        assert json.loads(json_path.read_text()) == records

    def test_missing_field_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="missing fields"):
            write_results_table(
                [{"method": "a", "period": "full"}], tmp_path / "bad.csv"
            )

    def test_dm_matrix_layout(self, tmp_path):
        p_values = np.array([[1.0, 0.01], [0.01, 1.0]])
        path = tmp_path / "dm.csv"
        write_dm_matrix(["a", "b"], p_values, path)
        with path.open() as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["method", "a", "b"]
        assert rows[1][0] == "a" and float(rows[1][2]) == 0.01

    def test_dm_matrix_shape_validation(self, tmp_path):
        with pytest.raises(ValueError, match="expected a 2x2"):
            write_dm_matrix(["a", "b"], np.ones((3, 3)), tmp_path / "dm.csv")
