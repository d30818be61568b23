import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from samplecert.errors import DomainError, ParseError
from samplecert.metrics import (DEFAULT_RADIUS_GRID, CertRecord, CurvePoint, abstain_rate, acr, aer,
                                best_over_runs, certification_curve, cra_at, emit_curves, era_at,
                                read_records, summary, write_records)
from samplecert.smoothing import ABSTAIN


def rec(i, correct, radius, triggered=False, abstain=False):
    label = ABSTAIN if abstain else (1 if correct else 0)
    return CertRecord(i, triggered, 1, label, radius, 0.5)


def test_era_all_correct_at_high_threshold():
    assert era_at([rec(i, True, 2.0) for i in range(5)], 1.75) == 1.0


def test_era_mixed_set():
    rs = [rec(0, True, 1.0), rec(1, True, 0.5), rec(2, False, 3.0)]
    assert era_at(rs, 0.75) == pytest.approx(1 / 3)
    assert era_at(rs, 0.0) == pytest.approx(2 / 3)


def test_cra_mirrors_era_on_triggered_records():
    rs = [rec(0, True, 1.0, True), rec(1, True, 0.5, True), rec(2, False, 3.0, True)]
    assert cra_at(rs, 0.75) == pytest.approx(1 / 3)


def test_wrong_subset_kind_and_empty_sets_error():
    with pytest.raises(DomainError):
        era_at([rec(0, True, 1.0, True)], 0.0)
    with pytest.raises(DomainError):
        cra_at([rec(0, True, 1.0)], 0.0)
    for fn in (aer, acr, abstain_rate):
        with pytest.raises(DomainError):
            fn([])
    with pytest.raises(DomainError):
        era_at([], 0.0)


def test_average_radius_rules():
    assert aer([rec(0, True, 1.48)]) == pytest.approx(1.48)
    assert aer([rec(0, True, 2.0), rec(1, False, 2.0)]) == 1.0
    assert acr([rec(i, True, 0.0, True, abstain=True) for i in range(4)]) == 0.0


def test_abstain_rate_examples_and_partition():
    assert abstain_rate([rec(i, True, 1.0) for i in range(10)]) == 0
    rs = [rec(0, True, 0.0, abstain=True)] + [rec(i, True, 1.0) for i in range(1, 1000)]
    assert abstain_rate(rs) == pytest.approx(0.001)
    mixed = [rec(0, True, 1.0), rec(1, False, 1.0), rec(2, True, 0.0, abstain=True), rec(3, True, 0.2)]
    right = era_at(mixed, 0.0)
    wrong = sum(1 for r in mixed if not r.correct and r.certified_label != ABSTAIN) / len(mixed)
    assert abstain_rate(mixed) == pytest.approx(1 - right - wrong)


def test_negative_radius_rejected():
    with pytest.raises(DomainError):
        CertRecord(0, False, 1, 1, -0.1, 0.5)


def test_records_round_trip(tmp_path):
    rs = [CertRecord(0, False, 1, 1, 0.1234567890123, 0.3, 0.99, 0.01),
          CertRecord(1, True, 0, ABSTAIN, 0.0, 0.25)]
    p = tmp_path / "r.jsonl"
    write_records(rs, p)
    back = read_records(p)
    assert back[0] == rs[0]
    assert back[1].certified_label == ABSTAIN and math.isnan(back[1].p_a_lower)
    assert '"label": "ABSTAIN"' in p.read_text()


def test_bad_record_line_reports_line_number(tmp_path):
    p = tmp_path / "r.jsonl"
    write_records([rec(0, True, 1.0)], p)
    with open(p, "a") as fh:
        fh.write("{broken\n")
    with pytest.raises(ParseError, match=":2:"):
        read_records(p)


def test_emit_two_rows_deterministic(tmp_path):
    rs = [rec(0, True, 0.3), rec(1, True, 0.1, True)]
    pts = certification_curve(rs, (0.0, 0.25))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    emit_curves(pts, a, tmp_path / "plot.json")
    emit_curves(pts, b)
    lines = a.read_text().splitlines()
    assert lines == ["radius,era,cra", "0.0000,1.000000,1.000000", "0.2500,1.000000,0.000000"]
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "plot.json").exists()


def test_emit_rejects_increasing_curve(tmp_path):
    pts = [CurvePoint(0.0, 0.5, 0.5), CurvePoint(0.25, 0.6, 0.4)]
    with pytest.raises(DomainError):
        emit_curves(pts, tmp_path / "c.csv")


def test_curve_on_default_grid_and_unsorted_grid():
    pts = certification_curve([rec(0, True, 1.0)])
    assert [p.radius_threshold for p in pts] == list(DEFAULT_RADIUS_GRID)
    assert math.isnan(pts[0].cra)
    with pytest.raises(DomainError):
        certification_curve([rec(0, True, 1.0)], (0.5, 0.0))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.booleans(), st.floats(0, 3)), min_size=1, max_size=40))
def test_curves_are_monotone(rows):
    rs = [rec(i, c, r, t) for i, (c, t, r) in enumerate(rows)]
    pts = certification_curve(rs)
    for a, b in zip(pts, pts[1:]):
        for x, y in ((a.era, b.era), (a.cra, b.cra)):
            assert np.isnan(x) or y <= x


def test_best_over_runs_takes_per_radius_max():
    c1 = [CurvePoint(0.0, 0.9, 0.2), CurvePoint(0.25, 0.5, 0.1)]
    c2 = [CurvePoint(0.0, 0.8, 0.6), CurvePoint(0.25, 0.7, 0.0)]
    assert best_over_runs([c1, c2]) == [CurvePoint(0.0, 0.9, 0.6), CurvePoint(0.25, 0.7, 0.1)]
    with pytest.raises(DomainError):
        best_over_runs([c1, c1[:1]])
    with pytest.raises(DomainError):
        best_over_runs([])


def test_summary_fields():
    s = summary([rec(0, True, 1.0), rec(1, True, 0.5, True, abstain=False)])
    assert s["n_clean"] == 1 and s["n_triggered"] == 1 and s["aer"] == 1.0 and s["acr"] == 0.5
    assert len(s["curve"]) == len(DEFAULT_RADIUS_GRID)
