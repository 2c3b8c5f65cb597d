import numpy as np
import pytest

from fracnn.core import Frame, PovertyThresholdTable, group_units
from fracnn.estimators import (
    EstimateReport,
    WeightedCDF,
    donor_totals,
    emit_report,
    family_alpha,
    format_report,
    income_changes,
    linear_total,
    median_variance,
    poverty_count_variance,
    replicate_imputation,
    replicate_incomes,
    standardized_se,
    woodruff_variance,
)
from fracnn.impute import MetricConfig, impute
from fracnn.mclab import ScenarioConfig, generate_scenario, replicate_scenario
from fracnn.replicate import delete_one_replicates

import oracles

HOUSEHOLDS = dict(
    population_households=3000, sample_households=300, household_sizes={1: 0.3, 2: 0.3, 3: 0.2, 4: 0.2},
    family_split=0.3, n_items=3, item_prevalence=(0.9, 0.3, 0.5), variance_strata=20, seed=9,
)


@pytest.fixture(scope="module")
def scenario():
    cfg = ScenarioConfig(**HOUSEHOLDS)
    frame, truth = generate_scenario(cfg, 0)
    return cfg, frame, truth, replicate_scenario(cfg, frame)


class TestFamilyAlpha:
    @pytest.mark.parametrize("k, a, b, expected", [
        (300.0, 300.0, 100.0, 1.0),
        (200.0, 300.0, 100.0, 0.5),
        (250.0, 100.0, 100.0, 1.0),
    ])
    def test_examples(self, k, a, b, expected):
        assert family_alpha(k, a, b) == expected


class TestReplicateIncomes:
    def test_reconstruction_identity(self, scenario):
        _, frame, _, res = scenario
        for k in (0, 7, 33):
            inc = replicate_incomes(res, k)
            alpha = family_alpha(inc.unit_k, inc.unit_a, inc.unit_b)
            diff = inc.unit_a != inc.unit_b
            np.testing.assert_allclose(
                (alpha * inc.unit_a + (1 - alpha) * inc.unit_b)[diff], inc.unit_k[diff], rtol=1e-9, atol=1e-6
            )
            # families with equal donor totals cannot move
            np.testing.assert_allclose(inc.unit_k[~diff], inc.unit_a[~diff])

    def test_fully_responding_family_is_constant(self, scenario):
        _, frame, _, res = scenario
        fam = group_units(frame, "family_id")
        complete = np.bincount(fam.index, weights=(~frame.response).sum(axis=1), minlength=fam.n_units) == 0
        inc = replicate_incomes(res, 3)
        np.testing.assert_array_equal(inc.unit_k[complete], inc.unit_a[complete])
        np.testing.assert_array_equal(inc.unit_a[complete], inc.unit_b[complete])

    def test_respondent_person_totals(self, scenario):
        _, frame, _, res = scenario
        ta, tb = donor_totals(res)
        full = frame.response.all(axis=1)
        np.testing.assert_array_equal(ta[full], frame.income[full].sum(axis=1))
        np.testing.assert_array_equal(tb[full], ta[full])

    def test_convex_combination(self):
        f = Frame.from_arrays([1, 2, 3], [1, 2, 3], [1, 2, 3], [1, 1, 1], [40] * 3, [100.0, 200.0, np.nan],
                              covariates={"x": [0.0, 1.0, 0.0]})
        (a,) = impute(f, MetricConfig(numeric={"x": 1.0}), 1, 2)
        res = replicate_imputation(f, [a], delete_one_replicates(f.w), "single")
        rf = res.replications[0]
        assert rf.n_events == 1
        rf.b[:] = 0.6
        rf.refresh()
        np.testing.assert_allclose(rf.event_fractions[0], [0.4, 0.6])
        rows, ks, d = income_changes(res)
        assert 100.0 + d[0] == pytest.approx(160.0)


def tiny_poverty(incomes, thresholds=10_000.0):
    n = len(incomes)
    pid = np.arange(1, n + 1)
    f = Frame.from_arrays(pid, pid, pid, np.ones(n), np.full(n, 40), np.array(incomes, dtype=float),
                          covariates={"x": np.arange(n, dtype=float)})
    table = PovertyThresholdTable({(0, 1, 0): thresholds})
    (a,) = impute(f, MetricConfig(numeric={"x": 1.0}), 1, 2)
    return replicate_imputation(f, [a], delete_one_replicates(f.w), "single"), table


class TestPoverty:
    def test_strict_inequality(self):
        res, table = tiny_poverty([5_000.0, 10_000.0, 50_000.0])
        p = poverty_count_variance(res, table)
        assert p.pov_a.tolist() == [1.0, 0.0, 0.0]
        assert p.estimate == 1.0

    def test_all_above_threshold(self):
        res, table = tiny_poverty([50_000.0, 60_000.0, np.nan, 70_000.0, 80_000.0])
        p = poverty_count_variance(res, table)
        assert p.estimate == 0.0 and p.report.naive_variance == 0.0 and p.report.imputation_variance == 0.0

    def test_age_groups_partition(self, scenario):
        _, frame, truth, res = scenario
        parts = [poverty_count_variance(res, truth.thresholds, (frame.age >= lo) & (frame.age <= hi)).estimate
                 for lo, hi in ((0, 17), (18, 64), (65, 200))]
        total = poverty_count_variance(res, truth.thresholds).estimate
        assert sum(parts) == pytest.approx(total, rel=1e-12)

    def test_members_share_status(self, scenario):
        _, frame, truth, res = scenario
        p = poverty_count_variance(res, truth.thresholds)
        fam = group_units(frame, "family_id")
        person = p.zeta[fam.index]
        assert set(np.unique(p.zeta)) <= {0.0, 1.0}
        assert p.estimate == pytest.approx(float(res.weights @ person))

    def test_replicated_status_is_interpolation(self, scenario):
        _, frame, truth, res = scenario
        from fracnn.estimators import _replicated_indicator

        fam = group_units(frame, "family_id")
        p = poverty_count_variance(res, truth.thresholds)
        ta, tb = donor_totals(res)
        from scipy import sparse

        members = sparse.csr_matrix((np.ones(frame.n), (fam.index, np.arange(frame.n))), shape=(fam.n_units, frame.n))
        _, _, (t, k, alpha, ind_k) = _replicated_indicator(res, fam, members, p.pov_a, p.pov_b, fam.total(ta), fam.total(tb))
        np.testing.assert_allclose(ind_k, alpha * p.pov_a[t] + (1 - alpha) * p.pov_b[t], rtol=0, atol=1e-15)

    def test_missing_threshold_key(self, scenario):
        _, _, _, res = scenario
        with pytest.raises(KeyError):
            poverty_count_variance(res, PovertyThresholdTable({(0, 1, 0): 1.0}))


class TestMedian:
    def test_order_statistic(self):
        cdf = WeightedCDF([50, 10, 40, 20, 30], np.ones(5))
        assert cdf.quantile(0.5) == 30
        assert cdf(30) == pytest.approx(0.6) and cdf(9) == 0.0 and cdf(1e9) == 1.0

    @pytest.mark.parametrize("seed", range(5))
    def test_weighted_quantile_oracle(self, seed):
        rng = np.random.default_rng(seed)
        v, w = rng.integers(0, 50, 40).astype(float), rng.uniform(0.5, 3, 40)
        assert WeightedCDF(v, w).quantile(0.5) == oracles.weighted_lower_median(v.tolist(), w.tolist())

    def test_cdf_is_nondecreasing_step(self):
        rng = np.random.default_rng(0)
        cdf = WeightedCDF(rng.normal(size=100), rng.uniform(size=100))
        u = np.linspace(-4, 4, 500)
        assert (np.diff(cdf(u)) >= 0).all()

    def test_degenerate_variance(self):
        cdf = WeightedCDF([10, 20, 30, 40, 50], np.ones(5))
        (p1, p2), v = woodruff_variance(cdf, 0.0)
        assert p1 == p2 == 0.5 and v == 0.0

    def test_scenario(self, scenario):
        _, frame, _, res = scenario
        m = median_variance(res)
        p1, p2 = m.p_interval
        assert p1 < 0.5 < p2 and m.v_med >= 0
        hh = group_units(frame, "household_id")
        ta, _ = donor_totals(res)
        assert m.median == oracles.weighted_lower_median(hh.total(ta).tolist(), res.weights[hh.head].tolist())

    def test_zero_weight(self, scenario):
        _, frame, _, res = scenario
        res.weights = np.zeros_like(res.weights)
        try:
            with pytest.raises(ValueError):
                median_variance(res)
        finally:
            res.weights = frame.w


class TestLinearTotal:
    def test_full_response_naive_equals_adjusted(self):
        cfg = ScenarioConfig(population_households=2000, sample_households=200, missing_rate=0.0, variance_strata=20, seed=1)
        frame, _ = generate_scenario(cfg)
        rep = linear_total(replicate_scenario(cfg, frame))
        assert rep.naive_variance == rep.imputation_variance
        assert rep.estimate == pytest.approx(float(frame.w @ frame.income[:, 0]))

    def test_sum_over_items(self, scenario):
        _, _, _, res = scenario
        parts = [linear_total(res, s) for s in range(3)]
        whole = linear_total(res)
        assert whole.estimate == pytest.approx(sum(p.estimate for p in parts), rel=1e-12)
        np.testing.assert_allclose(whole.adjusted_replicates, sum(p.adjusted_replicates for p in parts), rtol=1e-12)


class TestReport:
    @pytest.mark.parametrize("naive, imp, expected", [(870, 1161, 133), (3217, 4096, 127), (55.0, 55.0, 100)])
    def test_standardized_se(self, naive, imp, expected):
        assert standardized_se(naive, imp) == expected

    def test_formats_are_deterministic(self, tmp_path):
        reps = [EstimateReport("theta1", 1.0e5, 870.0**2, 1161.0**2), EstimateReport("median", 4.2e4, 9.0, 16.0)]
        csv1 = emit_report(reps, tmp_path / "a.csv", "csv")
        assert csv1 == format_report(reps, "csv")
        assert csv1.splitlines()[0] == "parameter,estimate,naive_se,imputation_se,std_se"
        assert csv1.splitlines()[1].endswith(",133")
        text = format_report(reps, "text")
        assert "Std. SE" in text and text.splitlines()[2].split()[-1] == "133"

    def test_empty(self):
        with pytest.raises(ValueError):
            format_report([], "csv")

    def test_unwritable(self, tmp_path):
        with pytest.raises(OSError):
            emit_report([EstimateReport("x", 1.0, 1.0, 1.0)], tmp_path / "no" / "dir.csv")
