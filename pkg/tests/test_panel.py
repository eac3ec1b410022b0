import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_panel
from gestkit import synth
from gestkit.errors import (
    DuplicateUnit,
    EmptyResult,
    FileUnreadable,
    MissingValue,
    NonBinaryOutcome,
    NonBinaryTreatment,
    SchemaMismatch,
    SingleArm,
)
from gestkit.panel import (
    ColumnMapping,
    Panel,
    PanelRow,
    RowFilter,
    group_summary_from_rates,
    load_panel,
    sample_flow,
    summarize_groups,
    write_panel,
)

MAPPING = ColumnMapping("id", "a", "y", ("l1", "l2"))


def write(tmp_path, text, name="p.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_load_three_rows(tmp_path):
    path = write(tmp_path, "id,a,y,l1,l2\nu1,1,0,3,1.5\nu2,0,1,2,0\nu3,1,1,7,2\n")
    panel = load_panel(path, MAPPING)
    assert panel.n == 3
    assert panel.schema == ("l1", "l2")
    assert panel.row(0) == PanelRow("u1", 1, 0, (3.0, 1.5))
    assert panel.provenance.startswith("csv:")


def test_extra_columns_ignored_and_order_free(tmp_path):
    path = write(tmp_path, "l2,junk,y,id,a,l1\n1,x,0,u1,1,3\n0,z,1,u2,0,2\n")
    panel = load_panel(path, MAPPING)
    assert panel.covariates.tolist() == [[3.0, 1.0], [2.0, 0.0]]


def test_non_binary_treatment_names_row(tmp_path):
    path = write(tmp_path, "id,a,y,l1,l2\nu1,1,0,3,1\nu2,2,0,3,1\n")
    with pytest.raises(NonBinaryTreatment, match="row 1"):
        load_panel(path, MAPPING)


def test_non_binary_outcome(tmp_path):
    path = write(tmp_path, "id,a,y,l1,l2\nu1,1,0.5,3,1\n")
    with pytest.raises(NonBinaryOutcome, match="row 0"):
        load_panel(path, MAPPING)


def test_missing_column_is_schema_mismatch(tmp_path):
    path = write(tmp_path, "id,a,y,l1\nu1,1,0,3\n")
    with pytest.raises(SchemaMismatch, match="l2"):
        load_panel(path, MAPPING)


def test_unreadable_file(tmp_path):
    with pytest.raises(FileUnreadable):
        load_panel(tmp_path / "absent.csv", MAPPING)


@pytest.mark.parametrize("token", ["", "NA", "nan", "null", "inf"])
def test_missing_policy(tmp_path, token):
    path = write(tmp_path, f"id,a,y,l1,l2\nu1,1,0,3,1\nu2,0,0,{token},1\nu3,0,1,1,1\n")
    with pytest.raises(MissingValue, match="row 1"):
        load_panel(path, MAPPING)
    panel = load_panel(path, MAPPING, drop_missing=True)
    assert panel.n == 2
    assert panel.dropped_missing == 1
    assert np.isfinite(panel.covariates).all()


def test_non_numeric_covariate(tmp_path):
    path = write(tmp_path, "id,a,y,l1,l2\nu1,1,0,abc,1\n")
    with pytest.raises(SchemaMismatch, match="non-numeric"):
        load_panel(path, MAPPING)


def test_duplicate_units_rejected(tmp_path):
    path = write(tmp_path, "id,a,y,l1,l2\nu1,1,0,3,1\nu1,0,0,2,1\n")
    with pytest.raises(DuplicateUnit):
        load_panel(path, MAPPING)


def test_panel_is_immutable():
    panel = make_panel([0, 1], [1, 0], [[1.0], [2.0]])
    with pytest.raises(ValueError):
        panel.covariates[0, 0] = 5.0
    with pytest.raises(AttributeError):
        panel.schema = ("x",)


def test_from_rows_checks_covariate_length():
    with pytest.raises(SchemaMismatch):
        Panel.from_rows(("l1", "l2"), [PanelRow("a", 0, 1, (1.0,))])


def test_facet_panel_round_trip(tmp_path, facet):
    panel, _ = facet
    path = tmp_path / "facet.csv"
    write_panel(panel, path)
    back = load_panel(path, ColumnMapping(covariates=panel.schema))
    assert back.n == 16_868
    assert back.equals(panel)
    write_panel(back, tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_bytes() == path.read_bytes()


@settings(max_examples=40, deadline=None)
@given(vals=st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=30))
def test_write_load_bit_identical(tmp_path_factory, vals):
    n = len(vals)
    panel = make_panel(np.arange(n) % 2, np.ones(n, dtype=int), np.array(vals).reshape(n, 1))
    path = tmp_path_factory.mktemp("rt") / "p.csv"
    write_panel(panel, path)
    assert load_panel(path, ColumnMapping(covariates=panel.schema)).equals(panel)


def test_flow_without_filters_is_identity():
    panel = make_panel([0, 1, 1], [0, 0, 1])
    out, flow = sample_flow(panel)
    assert out.equals(panel)
    assert [s.to_dict() for s in flow.stages] == [{"stage": "Input", "n_units": 3, "n_rows": 3, "reason": "-"}]


def test_flow_records_counts_and_reason_verbatim():
    panel = make_panel([0, 1, 1, 0, 1], [0, 1, 1, 0, 0], [[1], [2], [3], [4], [5]])
    f = RowFilter("outcome defined", lambda r: r.covariates[0] > 2, "Outcome not observable (3y)")
    out, flow = sample_flow(panel, [f])
    assert out.n == 3
    assert flow.final.n_rows == 3 and flow.final.n_units == 3
    assert flow.final.reason == "Outcome not observable (3y)"
    assert json.loads(json.dumps(flow.to_json()))[1]["stage"] == "outcome defined"


def test_flow_empty_result():
    panel = make_panel([0, 1], [0, 1])
    with pytest.raises(EmptyResult):
        sample_flow(panel, [RowFilter("none", lambda r: False, "x")])


@settings(max_examples=30, deadline=None)
@given(data=st.data())
def test_filter_composition(data):
    n = data.draw(st.integers(3, 25))
    cov = data.draw(st.lists(st.integers(0, 9), min_size=n, max_size=n))
    panel = make_panel(np.arange(n) % 2, np.zeros(n, dtype=int), np.array(cov, dtype=float).reshape(n, 1))
    cuts = data.draw(st.lists(st.integers(0, 9), min_size=1, max_size=4))
    filters = [RowFilter(f"ge{c}", (lambda c: lambda r: r.covariates[0] >= c)(c), "cut") for c in cuts]
    combined = RowFilter("all", lambda r: all(f.predicate(r) for f in filters), "cut")
    try:
        one_by_one, flow = sample_flow(panel, filters)
    except EmptyResult:
        with pytest.raises(EmptyResult):
            sample_flow(panel, [combined])
        return
    at_once, _ = sample_flow(panel, [combined])
    assert one_by_one.equals(at_once)
    counts = [s.n_rows for s in flow.stages]
    assert counts == sorted(counts, reverse=True)
    assert counts[0] == n


def test_facet_cohort_flow_matches_bookkeeping():
    raw, core, _, book = synth.facet_cohort()
    assert raw.n == 24_133
    final, flow = sample_flow(raw, synth.facet_filters(raw.schema), initial_stage="Full Engineering Cohort")
    assert [(s.stage, s.n_rows) for s in flow.stages] == book.expected_flow()
    assert [s.stage for s in flow.stages] == [
        "Full Engineering Cohort",
        "Valid 3-Year Labels",
        "Analysis Sample (T = 2)",
        "Modelling Dataset",
    ]
    assert [s.n_units for s in flow.stages] == [24_133, 22_537, 16_868, 16_868]
    assert final.select_covariates(core.schema).equals(core)


def test_group_summary_from_published_rates():
    g = group_summary_from_rates(11_139, 0.504, 5_729, 0.150)
    assert g.outcome_rate == pytest.approx(0.384, abs=5e-4)
    assert g.risk_difference == pytest.approx(0.354, abs=1e-12)
    assert g.treated_fraction == pytest.approx(0.660, abs=5e-4)


def test_group_summary_all_zero_outcomes():
    g = summarize_groups(make_panel([0, 1, 0, 1], [0, 0, 0, 0], [[1], [2], [3], [4]]))
    assert g.treated.outcome_rate == 0 and g.control.outcome_rate == 0
    assert g.risk_difference == 0
    d = g.to_dict()
    assert set(d["arms"][0]) == {"arm", "n", "outcome_rate", "covariate_means"}


def test_group_summary_single_arm():
    with pytest.raises(SingleArm):
        summarize_groups(make_panel([1, 1], [0, 1]))


@settings(max_examples=40, deadline=None)
@given(a=st.lists(st.integers(0, 1), min_size=2, max_size=60), seed=st.integers(0, 1000))
def test_overall_rate_is_weighted_mean_of_arms(a, seed):
    a = np.array(a)
    if a.min() == a.max():
        a[0] = 1 - a[0]
    y = np.random.default_rng(seed).integers(0, 2, len(a))
    g = summarize_groups(make_panel(a, y))
    mix = (g.treated.n * g.treated.outcome_rate + g.control.n * g.control.outcome_rate) / g.n
    assert abs(g.outcome_rate - mix) < 1e-12


def test_facet_summary_near_targets(facet):
    panel, _ = facet
    g = summarize_groups(panel)
    assert abs(g.treated_fraction - 0.660) < 0.05
    targets = {
        ("treated", "cum_subjects_enrolled"): 4.67,
        ("control", "cum_subjects_enrolled"): 2.41,
        ("treated", "current_term_load"): 1.69,
        ("control", "current_term_load"): 1.09,
    }
    arms = {"treated": g.treated, "control": g.control}
    for (arm, cov), target in targets.items():
        assert abs(arms[arm].covariate_means[cov] / target - 1) < 0.05
