import io
import logging
import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from wigem import ingest
from wigem.ingest import (CatalogError, ConstraintViolation, OccupationalGroup, Origin, RecordError,
                          SurveyRecord, complete_groups, complete_n_minus_1, group_records, parse_survey,
                          read_records, residual, write_records)

HEADER = ("occupation_text,upper_soc_code,data_element_text,data_type_text,estimate_type_text,"
          "estimate_type,unit_of_measure,additive_group,value\n")


def row(occ="Cooks", soc="352014", el="Sitting", lv="YES", kind="Estimate", value="50.0",
        etype="Percent", unit="Percentage", ag="7"):
    return f"{occ},{soc},{el},{lv},{kind},{etype},{unit},{ag},{value}\n"


def test_empty_stream_gives_no_records():
    assert parse_survey(io.StringIO("")) == []
    assert parse_survey(io.StringIO(HEADER)) == []


def test_fixture_drops_all_workers(fixture_dir):
    with open(fixture_dir / "small_extract.csv") as fh:
        recs = parse_survey(fh)
    assert len(recs) == 4
    assert all(r.occupation != "All Workers" for r in recs)
    by_level = {(r.occupation, r.level): r for r in recs}
    assert by_level[("Accountants and auditors", "NOT PRESENT")].value == pytest.approx(0.55)
    assert by_level[("Accountants and auditors", "OCCASIONALLY")].value is None
    assert by_level[("Cashiers", "CONSTANTLY")].value == pytest.approx(0.625)


def test_non_percent_rows_are_ignored():
    text = HEADER + row() + row(lv="NO", etype="Mode") + row(lv="NO", unit="Hours")
    assert [r.level for r in parse_survey(text)] == ["YES"]


def test_standard_error_rows_merge():
    text = HEADER + row(value="80") + row(kind="Standard Error", value="4")
    (rec,) = parse_survey(text)
    assert rec.value == pytest.approx(0.8)
    assert rec.std_error == pytest.approx(0.04)


def test_value_outside_range_is_rejected_with_line():
    text = HEADER + row() + row(lv="NO", value="120")
    with pytest.raises(RecordError, match="line 3"):
        parse_survey(text)


def test_malformed_row_reports_line():
    text = HEADER + "Cooks,352014,Sitting\n"
    with pytest.raises(RecordError) as err:
        parse_survey(text)
    assert err.value.line == 2


def test_lenient_skips_bad_row(caplog):
    text = HEADER + row() + row(lv="NO", value="abc")
    with caplog.at_level(logging.WARNING):
        recs = parse_survey(text, lenient=True)
    assert len(recs) == 1
    assert "line 3" in caplog.text


def test_duplicate_rows_are_rejected():
    with pytest.raises(RecordError, match="duplicate"):
        parse_survey(HEADER + row() + row())


def test_tab_delimited_schema():
    schema = ingest.Schema.from_mapping({"delimiter": "tab"})
    text = (HEADER + row()).replace(",", "\t")
    assert len(parse_survey(text, schema)) == 1


def test_record_invariants():
    with pytest.raises(ValueError):
        SurveyRecord("a", "111", 1, "e", "l", 1.5)
    with pytest.raises(ValueError):
        SurveyRecord("a", "111", 1, "e", "l", None, origin=Origin.N_MINUS_ONE)


CATALOG = {1: [("Req", lv) for lv in ("A", "B", "C", "D", "E")], 2: [("Bin", "NO"), ("Bin", "YES")]}


def rec(level, value, ag=1, occ="Job", element=None):
    element = element or ("Req" if ag == 1 else "Bin")
    return SurveyRecord(occ, "111111", ag, element, level, value)


def test_complete_appends_generated_levels():
    out = complete_groups([rec("A", 0.2), rec("C", 0.3), rec("E", 0.1)], CATALOG)
    assert [r.level for r in out] == ["A", "B", "C", "D", "E"]
    generated = [r for r in out if r.origin is Origin.GENERATED_LEVEL]
    assert [r.level for r in generated] == ["B", "D"]
    assert all(r.value is None for r in generated)


def test_complete_group_unchanged():
    full = [rec(lv, 0.2) for lv in "ABCDE"]
    assert complete_groups(full, CATALOG) == full


def test_catalog_missing_group_is_named():
    with pytest.raises(CatalogError, match="additive group 9"):
        complete_groups([rec("A", 0.1, ag=9)], CATALOG)


def test_completion_count_matches_catalog_sizes():
    rnd = random.Random(11)
    records, groups = [], []
    for i in range(10):
        ag = rnd.choice([1, 2])
        groups.append(ag)
        for el, lv in CATALOG[ag]:
            if rnd.random() < 0.6:
                records.append(SurveyRecord(f"Job{i}", "111111", ag, el, lv, None))
    present = {(r.occupation, r.additive_group) for r in records}
    expected = sum(len(CATALOG[ag]) for i, ag in enumerate(groups) if (f"Job{i}", ag) in present)
    assert len(complete_groups(records, CATALOG)) == expected


def test_n_minus_1_binary():
    (g,) = complete_n_minus_1(group_records(complete_groups([rec("YES", 0.8, ag=2)], CATALOG)))
    no = g.members[0]
    assert no.level == "NO" and no.value == pytest.approx(0.2) and no.origin is Origin.N_MINUS_ONE


def test_n_minus_1_fills_remaining_mass():
    recs = complete_groups([rec("A", 0.5), rec("B", 0.3), rec("C", 0.1), rec("D", None)], CATALOG)
    # E is generated and D is missing: two absent values, nothing filled
    (g,) = complete_n_minus_1(group_records(recs))
    assert g.n_missing == 2
    recs = complete_groups([rec("A", 0.5), rec("B", 0.3), rec("C", 0.1), rec("D", 0.0)], CATALOG)
    (g,) = complete_n_minus_1(group_records(recs))
    assert g.members[4].value == pytest.approx(0.1)


def test_n_minus_1_constraint_violation():
    recs = complete_groups([rec("A", 0.7), rec("B", 0.4)], CATALOG)
    with pytest.raises(ConstraintViolation, match="Job"):
        complete_n_minus_1(group_records(recs))


def test_n_minus_1_tolerates_float_noise():
    recs = [rec("A", 0.6), rec("B", 0.4 + 5e-10), rec("C", 0.0), rec("D", 0.0), rec("E", None)]
    (g,) = complete_n_minus_1(group_records(recs))
    assert g.members[4].value == 0.0


def test_residual_examples():
    assert residual(OccupationalGroup(("Job", 1), [rec("A", 0.5), rec("B", 0.3), rec("C", None)])) == pytest.approx(0.2)
    assert residual(OccupationalGroup(("Job", 1), [rec("A", 0.5), rec("B", 0.5)])) == 0.0
    assert residual(OccupationalGroup(("Job", 1), [rec("A", None), rec("B", None)])) == 1.0


def test_group_rejects_foreign_and_duplicate_members():
    with pytest.raises(ValueError):
        OccupationalGroup(("Other", 1), [rec("A", 0.1)])
    with pytest.raises(ValueError):
        OccupationalGroup(("Job", 1), [rec("A", 0.1), rec("A", 0.2)])


@st.composite
def partial_groups(draw):
    records = []
    for i in range(draw(st.integers(1, 6))):
        ag = draw(st.sampled_from([1, 2]))
        levels = CATALOG[ag]
        chosen = draw(st.lists(st.sampled_from(range(len(levels))), min_size=1, unique=True))
        weights = draw(st.lists(st.floats(0, 1), min_size=len(chosen), max_size=len(chosen)))
        total = sum(weights) or 1.0
        known = draw(st.lists(st.booleans(), min_size=len(chosen), max_size=len(chosen)))
        for j, w, k in zip(chosen, weights, known):
            el, lv = levels[j]
            records.append(SurveyRecord(f"Job{i}", "111111", ag, el, lv, w / total * 0.999 if k else None))
    return records


@given(partial_groups())
@settings(max_examples=60, deadline=None)
def test_completion_properties(records):
    done = complete_n_minus_1(group_records(complete_groups(records, CATALOG)))
    for g in done:
        assert g.n_missing != 1
        assert g.known_sum <= 1 + 1e-9
        assert len(g.members) == len(CATALOG[g.key[1]])
    flat = ingest.flatten(done)
    again = ingest.flatten(complete_n_minus_1(group_records(complete_groups(flat, CATALOG))))
    assert again == flat


@given(partial_groups())
@settings(max_examples=30, deadline=None)
def test_records_file_round_trip(records):
    flat = ingest.flatten(group_records(complete_groups(records, CATALOG)))
    buf = io.StringIO()
    write_records(flat, buf)
    buf.seek(0)
    assert read_records(buf) == flat


def test_records_file_columns():
    buf = io.StringIO()
    write_records([rec("A", None)], buf)
    header, line = buf.getvalue().splitlines()
    assert header == "occupation,soc_code,additive_group,element,level,value,std_error,origin"
    assert line == "Job,111111,1,Req,A,,,Observed"


def test_known_sum_is_exactly_rounded():
    vals = [0.1] * 10
    g = OccupationalGroup(("Job", 1), [rec(lv, v) for lv, v in zip("ABCDE", vals[:5])])
    assert g.known_sum == math.fsum(vals[:5])
