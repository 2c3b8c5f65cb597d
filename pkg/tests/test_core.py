import numpy as np
import pytest

from fracnn.core import (
    Frame,
    IngestionError,
    PersonRecord,
    PovertyThresholdTable,
    SampleDesign,
    family_threshold_keys,
    group_units,
    validate_frame,
)

from conftest import household_frame


def six_records(changes=None):
    recs = [
        PersonRecord(person_id=i, family_id=i, household_id=i, is_householder=True, age=40,
                     income=[float(10 * i)], response=[True], initial_weight=5.0, final_weight=5.0)
        for i in range(1, 7)
    ]
    for idx, kw in (changes or {}).items():
        for k, v in kw.items():
            setattr(recs[idx], k, v)
    return recs


class TestValidation:
    def test_well_formed_frame_has_empty_report(self):
        rep = validate_frame(six_records())
        assert rep.ok and len(rep) == 0

    def test_two_householders_named(self):
        recs = six_records({1: {"household_id": 1}})
        rep = validate_frame(recs)
        assert rep.kinds() == ["multiple_householders"]
        assert rep.violations[0].ident == 1

    def test_zero_initial_weight_named(self):
        rep = validate_frame(six_records({3: {"initial_weight": 0.0}}))
        assert rep.kinds() == ["nonpositive_w0"]
        assert rep.violations[0].ident == 4

    def test_duplicate_and_missing_householder(self):
        recs = six_records({2: {"person_id": 2, "household_id": 9, "is_householder": False}})
        kinds = validate_frame(recs).kinds()
        assert "duplicate_person_id" in kinds and "missing_householder" in kinds

    def test_unresolvable_threshold(self):
        table = PovertyThresholdTable({(0, 1, 1): 9000.0})
        rep = validate_frame(six_records(), thresholds=table)
        assert set(rep.kinds()) == {"unresolvable_threshold"}
        assert len(rep) == 6

    def test_design_labels(self):
        rep = validate_frame(six_records(), SampleDesign(strata=[1], domains=[0]))
        assert set(rep.kinds()) == {"unknown_stratum"}


class TestFrame:
    def test_nonresponse_masks_stored_value(self):
        f = Frame.from_arrays([2, 1], [1, 1], [1, 1], [0, 1], [30, 40], [[5.0], [7.0]], response=[[True], [False]])
        assert f.person_id.tolist() == [1, 2]
        assert np.isnan(f.income[0, 0]) and f.income[1, 0] == 5.0

    def test_records_round_trip(self):
        f = household_frame(2)
        g = Frame.from_records(f.to_records())
        np.testing.assert_array_equal(g.income, f.income)
        np.testing.assert_array_equal(g.family_id, f.family_id)

    def test_csv_round_trip(self, tmp_path):
        f = household_frame(3)
        f.to_csv(tmp_path / "p.csv")
        g = Frame.from_csv(tmp_path / "p.csv")
        np.testing.assert_array_equal(g.response, f.response)
        np.testing.assert_allclose(g.income, f.income, equal_nan=True)
        np.testing.assert_array_equal(g.column("x"), f.column("x"))

    def test_missing_file_is_ingestion_error(self, tmp_path):
        with pytest.raises(IngestionError):
            Frame.from_csv(tmp_path / "absent.csv")


class TestUnits:
    def test_reference_person_prefers_householder(self):
        f = household_frame()
        fam = group_units(f, "family_id")
        assert fam.ids.tolist() == [10, 20, 30, 31, 40]
        # family 31 has no householder: its only member is the reference
        assert f.person_id[fam.head].tolist() == [1, 4, 5, 6, 7]

    def test_threshold_keys(self):
        f = household_frame()
        ch, sz, ac = family_threshold_keys(f)
        assert ch.tolist() == [1, 0, 0, 0, 0]
        assert sz.tolist() == [3, 1, 1, 1, 2]
        assert ac.tolist() == [0, 1, 0, 0, 0]

    def test_totals(self):
        f = household_frame()
        hh = group_units(f, "household_id")
        np.testing.assert_allclose(hh.total(np.arange(8.0)), [3.0, 3.0, 9.0, 13.0])


class TestThresholds:
    def test_lookup_and_csv(self, tmp_path):
        t = PovertyThresholdTable({(0, 1, 0): 12000.0, (1, 3, 0): 19000.5})
        np.testing.assert_array_equal(t.lookup([0, 1, 2], [1, 3, 3], [0, 0, 0])[:2], [12000.0, 19000.5])
        assert np.isnan(t.lookup([2], [3], [0])[0])
        t.to_csv(tmp_path / "t.csv")
        assert PovertyThresholdTable.from_csv(tmp_path / "t.csv").items() == t.items()
