import numpy as np
import pytest

from fracnn.core import Frame, SampleDesign
from fracnn.impute import impute_item
from fracnn.mclab import SIX_UNIT_METRIC, SMALL_FRAME_METRIC, random_small_frame, small_frame_replication
from fracnn.replicate import (
    FLAG_NEGATIVE_DISCRIMINANT,
    FLAG_NONE,
    adjust_item,
    adjusted_fractional_weights,
    build_variance_groups,
    delete_one_replicates,
    delta_factor,
    dump_replication_csv,
    jackknife_variance,
    naive_donor_replicate_weights,
    replicate_factors,
    solve_adjustment,
)

import oracles


def households(n, w0=2.0, size=1):
    pid = np.arange(1, n * size + 1)
    hh = np.repeat(np.arange(1, n + 1), size)
    head = np.zeros(n * size, dtype=bool)
    head[::size] = True
    return Frame.from_arrays(pid, hh, hh, head, np.full(n * size, 40), np.ones(n * size), w0=np.full(n * size, w0))


class TestVarianceGroups:
    def test_hundred_households_fifty_strata(self):
        g = build_variance_groups(households(100), SampleDesign(50, 2))
        counts = np.bincount(g.psu, minlength=100)
        assert (counts == 1).all()

    def test_seven_households_two_strata(self):
        g = build_variance_groups(households(7), SampleDesign(2, 2))
        assert np.bincount(g.var_stratum).tolist() == [4, 3]
        # half ascending then half descending, dealt systematically
        assert g.group[:4].tolist() == [0, 1, 1, 0]
        assert g.group[4:].tolist() == [0, 1, 0]

    def test_household_members_share_group(self):
        g = build_variance_groups(households(10, size=3), SampleDesign(2, 2))
        assert (g.psu.reshape(10, 3) == g.psu[::3, None]).all()

    def test_too_few_households(self):
        with pytest.raises(ValueError, match="fewer variance strata"):
            build_variance_groups(households(1), SampleDesign(1, 2))


class TestFactors:
    def test_w0_two(self):
        f = households(4)
        reps = replicate_factors(build_variance_groups(f, SampleDesign(2, 2)), f.w0)
        F = reps.factors()
        assert delta_factor(np.array([2.0]))[0] == pytest.approx(0.5)
        np.testing.assert_allclose(F[:, 0], [0.5, 1.5, 1.0, 1.0])
        np.testing.assert_array_equal(reps.c, 1.0)

    def test_take_all_unit_has_unit_factors(self):
        f = households(4, w0=1.0)
        F = replicate_factors(build_variance_groups(f, SampleDesign(2, 2)), f.w0).factors()
        np.testing.assert_array_equal(F, 1.0)

    def test_w0_below_one_rejected(self):
        with pytest.raises(ValueError):
            delta_factor(np.array([0.5]))

    def test_only_own_stratum_replicates_touch_a_person(self):
        f = households(30, w0=3.0)
        F = replicate_factors(build_variance_groups(f, SampleDesign(5, 3)), f.w0).factors()
        assert ((F != 1.0).sum(axis=1) == 3).all()

    def test_generalized_groups_match_formula(self):
        f = households(9, w0=4.0)
        F = replicate_factors(build_variance_groups(f, SampleDesign(1, 3)), f.w0).factors()
        d = oracles.delta(4.0, 3)
        assert sorted(set(np.round(F.ravel(), 12))) == sorted({round(d, 12), round(1 + (1 - d) / 2, 12)})

    def test_nondonor_deficit_is_zero_with_initial_weights(self):
        f = households(20, w0=7.0)
        reps = replicate_factors(build_variance_groups(f, SampleDesign(5, 2)), f.w0).apply(f.w)
        phi = ((reps.weights - 7.0) ** 2) @ reps.c
        np.testing.assert_allclose(phi, 7.0**2 - 7.0)


class TestJackknife:
    def test_mean_of_one_to_four(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        reps = delete_one_replicates(np.full(4, 0.25))
        est = reps.weights.T @ x
        v = jackknife_variance(est, float(x.mean()), reps.c)
        assert v == pytest.approx(oracles.jackknife_mean_variance(x), abs=1e-12)
        assert v == pytest.approx(5 / 12, abs=1e-12)

    def test_constant_replicates(self):
        assert jackknife_variance(np.full(5, 3.0), 3.0, np.ones(5)) == 0.0

    def test_mean_centering(self):
        assert jackknife_variance([1.0, 3.0], c=[1.0, 1.0], center="mean") == 2.0


class TestNaiveReplicates:
    def test_six_unit_phi_matches_double_loop(self, six_frame):
        a = impute_item(six_frame, 0, SIX_UNIT_METRIC, 1, 2)
        reps = delete_one_replicates(six_frame.w)
        resp = six_frame.response[:, 0]
        alpha, arep, phi = naive_donor_replicate_weights(a, resp, six_frame.w, reps)
        brute = oracles.brute_phi(6, reps.weights.tolist(), reps.c.tolist(), resp, a.recipients, a.donors, a.w1,
                                  alpha.tolist())
        np.testing.assert_allclose(phi, np.array(brute)[resp], rtol=1e-12)
        # donor 2 has no point recipients: its replicate weights are its own
        np.testing.assert_array_equal(arep[1], reps.weights[1])

    def test_base_replicates_give_zero_phi(self, six_frame):
        a = impute_item(six_frame, 0, SIX_UNIT_METRIC, 1, 2)
        reps = delete_one_replicates(six_frame.w)
        reps.weights = np.repeat(six_frame.w[:, None], 6, axis=1)
        _, _, phi = naive_donor_replicate_weights(a, six_frame.response[:, 0], six_frame.w, reps)
        np.testing.assert_array_equal(phi, 0.0)


class TestSolver:
    def test_smaller_root(self):
        # b^2 + 2b - 1.75 = 0 has roots 0.658 and -2.658
        s = solve_adjustment([1.0], [1.0], 1.0, 1.75)
        assert s.b == pytest.approx(oracles.six_unit_b_equal_fractions(), abs=1e-14)
        assert s.flag == "" and abs(s.residual) < 1e-12

    def test_negative_discriminant_minimizer(self):
        s = solve_adjustment([1.0], [1.0], 1.0, -5.0)
        assert s.flag == "negative_discriminant" and s.b == pytest.approx(-1.0)

    def test_unadjustable(self):
        s = solve_adjustment([0.0], [0.0], 1.0, 3.0)
        assert s.flag == "unadjustable" and s.b == 0.0

    def test_nothing_to_do(self):
        s = solve_adjustment([], [], 1.0, 0.0)
        assert s.b == 0.0 and not s.flagged


class TestAdjustedFractions:
    def test_six_unit_equal_fractions(self, six_frame):
        a, reps, rf = small_frame_replication(six_frame, SIX_UNIT_METRIC, 2, 2, "delete1")
        b = oracles.six_unit_b_equal_fractions()
        np.testing.assert_allclose(rf.b, b, rtol=1e-12)
        # deleting the nearer donor of the first recipient
        k = 0
        np.testing.assert_allclose(rf.fractions(k)[0], [0.5 * (1 - b), 0.5 * (1 + b)], rtol=1e-12)

    def test_first_donor_deletion_shifts_mass(self, six_frame):
        f = six_frame.with_weights(six_frame.w0)
        a = impute_item(f, 0, SIX_UNIT_METRIC, 1, 2)
        reps = delete_one_replicates(f.w)
        rf = adjust_item(f, a, reps, "individual")
        for e in range(rf.n_events):
            bb = rf._event_b[e]
            np.testing.assert_allclose(rf.event_fractions[e], [1 - bb, bb], rtol=1e-12)

    def test_zero_b_keeps_base(self, six_frame):
        _, _, rf = small_frame_replication(six_frame, SIX_UNIT_METRIC, 2, 2, "delete1")
        rf.b[:] = 0.0
        adjusted_fractional_weights(rf)
        np.testing.assert_array_equal(rf.fraction_table(), np.repeat(rf.assignment.w1[:, :, None], 6, axis=2))

    @pytest.mark.parametrize("mode", ["individual", "grouped"])
    def test_fractions_sum_to_one(self, mode):
        rng = np.random.default_rng(3)
        f = random_small_frame(rng, n=150)
        _, _, rf = small_frame_replication(f, SMALL_FRAME_METRIC, 1, 2, mode=mode)
        assert np.abs(rf.fraction_table().sum(axis=1) - 1).max() <= 1e-12

    def test_solver_equations_hold(self):
        f = random_small_frame(np.random.default_rng(4), n=180)
        _, _, rf = small_frame_replication(f, SMALL_FRAME_METRIC, 1, 2)
        ok = rf.flag == FLAG_NONE
        scale = np.maximum(np.abs(rf.target), 1.0)
        assert (np.abs(rf.residual[ok]) / scale[ok]).max() < 1e-9

    def test_dump(self, tmp_path, six_frame):
        _, _, rf = small_frame_replication(six_frame, SIX_UNIT_METRIC, 2, 2, "delete1")
        dump_replication_csv(rf, six_frame, tmp_path / "f.csv", tmp_path / "d.csv")
        lines = (tmp_path / "f.csv").read_text().splitlines()
        assert lines[0].startswith("item,recipient_id,replicate") and len(lines) == 1 + rf.n_events
        assert len((tmp_path / "d.csv").read_text().splitlines()) == 1 + rf.unit_ids.shape[0]

    def test_mode_checks(self, six_frame):
        a = impute_item(six_frame, 0, SIX_UNIT_METRIC, 2, 2)
        reps = delete_one_replicates(six_frame.w)
        with pytest.raises(ValueError):
            adjust_item(six_frame, a, reps, "individual")
        with pytest.raises(ValueError):
            adjust_item(six_frame, a, reps, "bogus")
