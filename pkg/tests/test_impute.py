import numpy as np
import pytest

from fracnn.core import Frame
from fracnn.impute import (
    DonorIndex,
    MetricConfig,
    ThinNeighborhoodError,
    find_donors,
    impute,
    impute_item,
    imputed_linear_estimate,
    imputed_values,
)
from fracnn.mclab import SIX_UNIT_METRIC

import oracles


def line_frame(xs, ys, pids=None, cells=None):
    n = len(xs)
    pids = list(range(1, n + 1)) if pids is None else pids
    return Frame.from_arrays(
        person_id=pids, family_id=pids, household_id=pids, is_householder=np.ones(n), age=np.full(n, 40),
        income=np.array(ys, dtype=float), w0=np.ones(n),
        covariates={"x": np.array(xs, dtype=float), "cell": np.zeros(n, int) if cells is None else np.array(cells)},
    )


X = MetricConfig(numeric={"x": 1.0})


class TestFindDonors:
    def test_exact_match_ranked_first(self):
        f = line_frame([0.0, 3.0, 5.0, 1.0], [1.0, 2.0, 3.0, np.nan])
        f.covariates["x"][0] = 1.0
        assert find_donors(f, 4, 0, 2, X)[0] == 1

    def test_equidistant_lower_id_first(self):
        f = line_frame([0.0, 2.0, 1.0], [5.0, 6.0, np.nan], pids=[7, 3, 9])
        # persons 3 (x=2) and 7 (x=0) are both at distance 1 from person 9
        assert find_donors(f, 9, 0, 2, X) == [3, 7]

    def test_line_distances_one_and_two(self):
        f = line_frame([1.0, 2.0, 3.0, 4.0, 0.0], [1.0, 2.0, 3.0, 4.0, np.nan])
        a = impute_item(f, 0, X, 1, 2)
        np.testing.assert_array_equal(a.distances[0], [1.0, 2.0])
        assert f.person_id[a.donors[0]].tolist() == [1, 2]

    def test_thin_neighborhood_names_cell(self):
        f = line_frame([0, 1, 2, 3], [1.0, np.nan, 2.0, np.nan], cells=[0, 0, 1, 1])
        m = MetricConfig(blocking=("cell",), numeric={"x": 1.0})
        with pytest.raises(ThinNeighborhoodError) as e:
            impute_item(f, 0, m, 1, 2)
        assert e.value.available == 1 and e.value.needed == 2

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_brute_force_scan(self, seed):
        rng = np.random.default_rng(seed)
        n = 120
        xs = rng.integers(0, 6, size=(n, 2)).astype(float)  # many ties
        cells = rng.integers(0, 3, n)
        y = rng.normal(size=n)
        y[rng.random(n) < 0.35] = np.nan
        f = Frame.from_arrays(
            person_id=rng.permutation(np.arange(1, n + 1)) * 3, family_id=np.arange(n), household_id=np.arange(n),
            is_householder=np.ones(n), age=np.full(n, 40), income=y,
            covariates={"a": xs[:, 0], "b": xs[:, 1], "cell": cells},
        )
        m = MetricConfig(blocking=("cell",), numeric={"a": 1.0, "b": 2.0})
        a = impute_item(f, 0, m, 1, 3)
        coords = np.stack([f.column("a"), 2 * f.column("b")], axis=1).tolist()
        cells_s = f.column("cell").tolist()
        resp = np.flatnonzero(f.response[:, 0]).tolist()
        for r, j in enumerate(a.recipients):
            expect = oracles.brute_nearest(coords, cells_s, resp, j, 3, f.person_id.tolist())
            assert a.donors[r].tolist() == expect


class TestFractions:
    def test_point_and_variance_fractions(self, six_frame):
        a = impute_item(six_frame, 0, SIX_UNIT_METRIC, 1, 2)
        np.testing.assert_array_equal(a.w1, [[1.0, 0.0], [1.0, 0.0]])
        np.testing.assert_array_equal(a.w2, [[0.5, 0.5], [0.5, 0.5]])

    def test_self_donation_and_con1(self, six_frame):
        a = impute_item(six_frame, 0, SIX_UNIT_METRIC, 2, 2)
        resp = six_frame.response[:, 0]
        P = a.point_matrix(6, resp).toarray()
        assert all(P[i, i] == 1.0 for i in np.flatnonzero(resp))
        np.testing.assert_allclose(P.sum(axis=0), 1.0)
        np.testing.assert_allclose(a.variance_matrix(6, resp).toarray().sum(axis=0), 1.0)

    def test_recipient_never_donates(self, six_frame):
        a = impute_item(six_frame, 0, SIX_UNIT_METRIC, 1, 2)
        assert not np.isin(a.donors, a.recipients).any()


class TestLinearEstimate:
    def test_two_donor_average(self):
        f = line_frame([0.0, 2.0, 1.0], [10.0, 20.0, np.nan])
        a = impute_item(f, 0, X, 2, 2)
        assert imputed_values(f, a)[2] == 15.0

    def test_no_missing_gives_full_total(self):
        f = line_frame([0.0, 1.0, 2.0], [1.0, 2.0, 4.0])
        f = f.with_weights(np.array([1.0, 2.0, 3.0]))
        (a,) = impute(f, X)
        theta, alpha, _ = imputed_linear_estimate(f, a)
        assert theta == 17.0
        np.testing.assert_array_equal(alpha, f.w)

    @pytest.mark.parametrize("m1", [1, 2])
    def test_six_unit_matches_alpha_sum(self, six_frame, m1):
        a = impute_item(six_frame, 0, SIX_UNIT_METRIC, m1, 2)
        theta, alpha, _ = imputed_linear_estimate(six_frame, a)
        resp = six_frame.response[:, 0]
        brute = oracles.brute_alpha(6, six_frame.w, resp, a.recipients, a.donors, a.w1)
        np.testing.assert_allclose(alpha, brute, rtol=0, atol=1e-12)
        y = np.nan_to_num(six_frame.income[:, 0])
        assert theta == pytest.approx(sum(b * v for b, v in zip(brute, y)), rel=1e-12)
        expected = 10 * (3 + 5 + 8 + 10) + 10 * ((3.0 + 8.0) if m1 == 1 else (4.0 + 9.0))
        assert theta == pytest.approx(expected, rel=1e-12)


def test_index_reuse_is_read_only(six_frame):
    idx = DonorIndex(six_frame, 0, SIX_UNIT_METRIC, 2)
    first = find_donors(six_frame, 5, 0, 2, SIX_UNIT_METRIC, idx)
    assert find_donors(six_frame, 5, 0, 2, SIX_UNIT_METRIC, idx) == first == [1, 2]
