import csv
import warnings

import numpy as np
import pytest

from voltensor import ptpoet, study
from voltensor.study import NORMS, StudyDesign


class TestStudyDesign:
    def test_defaults(self):
        design = StudyDesign()
        assert design.p == 50
        assert design.d_grid == (50, 100)
        assert design.m_grid == (250, 2000)
        assert design.n_targets == 20

    def test_needs_a_target(self):
        with pytest.raises(ValueError, match="n_targets"):
            StudyDesign(n_targets=0)

    def test_frequencies_must_nest(self):
        with pytest.raises(ValueError, match="m=300 must divide"):
            StudyDesign(m_grid=(300, 2000))

    def test_windows_must_clear_the_warmup(self):
        with pytest.raises(ValueError, match="covariate warmup"):
            StudyDesign(d_grid=(22, 100))
        StudyDesign(d_grid=(23, 100))


@pytest.fixture(scope="module")
def window_case():
    rng = np.random.default_rng(8)
    p, n_days = 8, 30
    base = rng.standard_normal((p, p + 2))
    y = np.empty((p, p, n_days))
    for t in range(n_days):
        bump = 0.1 * rng.standard_normal((p, p + 2))
        y[:, :, t] = (base + bump) @ (base + bump).T / p
    x_window = rng.lognormal(size=(n_days, 3))
    x_next = rng.lognormal(size=3)
    return y, x_window, x_next


class TestMethodPredictions:
    def test_returns_the_comparison_methods(self, window_case):
        preds = study.method_predictions(*window_case, 2, 1, 0.1)
        assert set(preds) == set(study.COMPARISON_METHODS)

    def test_predictions_are_symmetric(self, window_case):
        preds = study.method_predictions(*window_case, 2, 1, 0.1)
        for name, pred in preds.items():
            np.testing.assert_allclose(pred, pred.T, atol=1e-12, err_msg=name)
            assert np.all(np.isfinite(pred))

    def test_raw_method_carries_the_last_day(self, window_case):
        y, x_window, x_next = window_case
        preds = study.method_predictions(y, x_window, x_next, 2, 1, 0.1)
        np.testing.assert_array_equal(preds["prvm"], y[:, :, -1])

    def test_truncation_method_recomposed(self, window_case):
        y, x_window, x_next = window_case
        tau = 0.1
        preds = study.method_predictions(y, x_window, x_next, 2, 1, tau)
        w, v = np.linalg.eigh(y[:, :, -1])
        low_rank = (v[:, -2:] * w[-2:]) @ v[:, -2:].T
        resid = ptpoet.adaptive_threshold(y[:, :, -1] - low_rank, tau, "soft")
        np.testing.assert_allclose(preds["poet"], low_rank + resid, atol=1e-12)

    def test_factor_methods_share_the_residual(self, window_case):
        # subtracting each model's own dated prediction leaves the shared
        # thresholded day-D residual, identical across the two
        y, x_window, x_next = window_case
        tau = 0.1
        preds = study.method_predictions(y, x_window, x_next, 2, 1, tau)
        model_t = ptpoet.fit(y, None, 2, 1, tau)
        sieve = ptpoet.build_sieve(x_window, 2)
        model_p = ptpoet.fit(y, sieve, 2, 1, tau)
        resid_t = preds["tpoet"] - (ptpoet.predict(model_t) - model_t.idio_mean)
        resid_p = preds["ptpoet"] - (
            ptpoet.predict(model_p, x_next) - model_p.idio_mean
        )
        np.testing.assert_allclose(resid_t, resid_p, atol=1e-10)

    def test_eigen_ar_methods_optional(self, window_case):
        with warnings.catch_warnings():
            # the default parameter window exceeds these 30 days
            warnings.simplefilter("ignore", UserWarning)
            preds = study.method_predictions(
                *window_case, 2, 1, 0.1, include_eigen_ar=True
            )
        assert set(preds) == set(study.COMPARISON_METHODS) | {"fivar", "fivar_h"}
        for name in ("fivar", "fivar_h"):
            np.testing.assert_allclose(preds[name], preds[name].T, atol=1e-12)


SMOKE_DESIGN = StudyDesign(
    p=8, d_grid=(24,), m_grid=(60, 120), n_targets=2, r1=2, r2=1
)


class TestRunSeed:
    def test_scores_every_cell_and_method(self):
        out = study.run_seed(SMOKE_DESIGN, seed=0)
        assert set(out) == {(24, 60), (24, 120)}
        for cell in out.values():
            assert set(cell) == set(study.COMPARISON_METHODS)
            for errs in cell.values():
                assert errs.shape == (len(NORMS),)
                assert np.all(errs > 0) and np.all(np.isfinite(errs))


class TestComparisonStudy:
    def test_stacks_seeds_and_medians(self, tmp_path):
        results = study.run_comparison_study(SMOKE_DESIGN, [0, 1])
        arr = results[(24, 60)]["ptpoet"]
        assert arr.shape == (2, len(NORMS))
        medians = study.median_errors(results)
        np.testing.assert_allclose(
            medians[(24, 60)]["ptpoet"], np.median(arr, axis=0)
        )

        path = tmp_path / "medians.csv"
        study.write_median_table(results, path)
        with path.open() as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["D", "m", "method", "norm", "median_error"]
        assert len(rows) == 1 + 2 * len(study.COMPARISON_METHODS) * len(NORMS)
        by_key = {
            (int(r[0]), int(r[1]), r[2], r[3]): float(r[4]) for r in rows[1:]
        }
        assert by_key[(24, 60, "ptpoet", "frobenius")] == pytest.approx(
            medians[(24, 60)]["ptpoet"][0]
        )


class TestRankStudy:
    def test_reports_rates_and_picks(self):
        out = study.run_rank_study([0], p=10, D=30, m=200, r_max=4)
        assert out["n_seeds"] == 1
        assert 0.0 <= out["gap_rate"] <= 1.0
        assert 0.0 <= out["ratio_rate"] <= 1.0
        (row,) = out["picks"]
        assert set(row) == {"gap", "ratio"}
        for pair in row.values():
            assert len(pair) == 2
