import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_panel
from gestkit.diagnostics import (
    SMD_TARGET,
    ZeroVarianceWarning,
    balance_report,
    evalue,
    evalue_bases,
    missing_count,
    positivity_report,
    smd,
)
from gestkit.errors import ContractViolation, NonPositiveRR
from gestkit.iptw import PropensityScores, WeightSet, WeightStats, fit_propensity, stabilized_weights, truncate_weights
from gestkit.panel import group_summary_from_rates
from oracles import evalue_reference


def two_arm_panel(x1, x0):
    x1, x0 = np.asarray(x1, float), np.asarray(x0, float)
    a = np.r_[np.ones(x1.size), np.zeros(x0.size)].astype(int)
    return make_panel(a, np.zeros(a.size, dtype=int), np.r_[x1, x0].reshape(-1, 1))


def test_smd_published_example():
    # two points m +/- d per arm have ddof=1 variance 2 d^2; pick d so each arm SD is 2.028
    d = 2.028 / math.sqrt(2.0)
    panel = two_arm_panel([4.67 - d, 4.67 + d], [2.41 - d, 2.41 + d])
    assert smd(panel, "l1") == pytest.approx((4.67 - 2.41) / 2.028, rel=1e-12)
    assert smd(panel, "l1") == pytest.approx(1.114, abs=5e-4)


def test_identical_arms_give_zero():
    panel = two_arm_panel([1, 2, 3, 4], [1, 2, 3, 4])
    assert smd(panel, "l1") == 0.0


def test_zero_variance_with_differing_means_warns_inf():
    panel = two_arm_panel([3, 3, 3], [1, 1])
    with pytest.warns(ZeroVarianceWarning):
        assert smd(panel, "l1") == math.inf
    assert smd(two_arm_panel([2, 2], [2, 2]), "l1") == 0.0


@settings(max_examples=50, deadline=None)
@given(
    x=st.lists(st.floats(-50, 50), min_size=6, max_size=40),
    c=st.floats(0.01, 100.0),
    b=st.floats(-100.0, 100.0),
)
def test_smd_affine_invariance(x, c, b):
    x = np.array(x)
    half = len(x) // 2
    base = two_arm_panel(x[:half], x[half:])
    if x[:half].std() == 0 and x[half:].std() == 0:
        return
    moved = two_arm_panel(c * x[:half] + b, c * x[half:] + b)
    assert smd(moved, "l1") == pytest.approx(smd(base, "l1"), abs=1e-10, rel=1e-8)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), u=st.floats(0.1, 10.0))
def test_uniform_weights_equal_unweighted(seed, u):
    rng = np.random.default_rng(seed)
    panel = two_arm_panel(rng.normal(1, 2, 15), rng.normal(0, 1, 20))
    w = np.full(panel.n, u)
    assert smd(panel, "l1", w) == smd(panel, "l1")


def test_weighted_smd_uses_unweighted_pooled_sd_by_default():
    panel = two_arm_panel([0.0, 1.0, 2.0, 6.0], [0.0, 1.0, 1.0, 2.0])
    w = np.array([1.0, 1.0, 1.0, 3.0, 2.0, 1.0, 1.0, 1.0])
    m1 = np.average([0, 1, 2, 6], weights=[1, 1, 1, 3])
    m0 = np.average([0, 1, 1, 2], weights=[2, 1, 1, 1])
    pooled = math.sqrt((np.var([0, 1, 2, 6], ddof=1) + np.var([0, 1, 1, 2], ddof=1)) / 2)
    assert smd(panel, "l1", w) == pytest.approx(abs(m1 - m0) / pooled, rel=1e-12)
    assert smd(panel, "l1", w, weighted_variance=True) != pytest.approx(abs(m1 - m0) / pooled)


def test_facet_balance_after_weighting(facet):
    panel, _ = facet
    ps = fit_propensity(panel)
    raw = stabilized_weights(ps, panel)
    ws = truncate_weights(raw, 99)
    rep = balance_report(panel, ps, ws, raw)
    assert rep.balanced
    for c in rep.covariates:
        assert c.smd_weighted < SMD_TARGET
    assert rep.covariates[0].smd_raw > 0.8
    assert rep.missing_count == 0


def test_positivity_published_range_has_advisory():
    scores = np.r_[0.189, np.linspace(0.3, 0.9, 50), 0.995, 0.999]
    rep = positivity_report(PropensityScores(scores))
    assert rep.passed
    assert (rep.score_min, rep.score_max) == (0.189, 0.999)
    assert rep.n_above == 2 and rep.n_below == 0
    assert rep.advisory_count > 0


def test_positivity_all_half():
    rep = positivity_report(np.full(10, 0.5))
    assert rep.passed and rep.advisory_count == 0


def test_positivity_rejects_boundary_scores():
    with pytest.raises(ContractViolation):
        positivity_report(np.array([0.3, 1.0]))


def test_evalue_examples():
    assert evalue(1.0).evalue_point == 1.0
    rr = 0.504 / 0.150
    assert rr == pytest.approx(3.36)
    assert evalue(rr).evalue_point == pytest.approx(6.18, abs=0.01)
    prot = evalue(0.5)
    assert prot.inverted and prot.rr_input == 2.0
    assert prot.evalue_point == pytest.approx(2 + math.sqrt(2), abs=1e-12)
    assert prot.evalue_point == pytest.approx(3.41, abs=5e-3)


@pytest.mark.parametrize("rr", [0.0, -1.0, math.inf, math.nan])
def test_evalue_rejects_bad_ratio(rr):
    with pytest.raises(NonPositiveRR):
        evalue(rr)


@settings(max_examples=100, deadline=None)
@given(r1=st.floats(1.0, 1e4), r2=st.floats(1.0, 1e4))
def test_evalue_formula_and_monotone(r1, r2):
    e1, e2 = evalue(r1).evalue_point, evalue(r2).evalue_point
    assert e1 == pytest.approx(evalue_reference(r1), rel=1e-12, abs=1e-12)
    assert e1 >= r1 >= 1
    if r1 < r2:
        assert e1 <= e2


def test_evalue_bases_labelled():
    g = group_summary_from_rates(11_139, 0.504, 5_729, 0.150)
    a, b = evalue_bases(g, 0.253)
    assert "raw arm risk ratio" in a.basis
    assert a.evalue_point == pytest.approx(evalue_reference(0.504 / 0.150), rel=1e-12)
    assert b.evalue_point == pytest.approx(evalue_reference((0.150 + 0.253) / 0.150), rel=1e-12)


def test_missing_check_runs_and_reports_zero():
    panel = two_arm_panel([1, 2], [3, 4])
    assert missing_count(panel) == 0


def test_balance_table_rows():
    panel = two_arm_panel([1, 2, 4, 5], [0, 1, 1, 2])
    ps = PropensityScores(np.full(panel.n, 0.5))
    w = np.ones(panel.n)
    ws = WeightSet(w, WeightStats.of(w))
    table = balance_report(panel, ps, ws, ws).table()
    checks = [r["check"] for r in table]
    assert checks[0] == "Positivity: PS range" and table[0]["assessment"] == "PASSED"
    assert "SMD: l1" in checks and "SMD (weighted): l1" in checks
    assert checks[-1].startswith("Missing data")
    assert table[-1]["value"] == 0 and table[-1]["assessment"] == "PASSED"
    assert all(set(r) == {"check", "value", "threshold", "assessment"} for r in table)
