import csv
import io
import math

import pytest
from hypothesis import given, settings, strategies as st

from snhc import central_maps as cm
from snhc import hypotheses as hy
from snhc.domains import build_ladder
from snhc.errors import OutOfWindow, PreconditionFailed, SideConstraintViolated
from snhc.hypotheses import Condition, HypothesisReport


def _sn_oracle(lam, K):
    return 4 * math.exp(K) * (1 - lam) / lam ** 6


def _by_condition(reports):
    return {r.condition: r for r in reports}


def test_t123_canonical(hyp_map, hyp_ladder):
    reps = _by_condition(hy.check_T123(hyp_map, hyp_ladder))
    t2, t3 = reps[Condition.T2], reps[Condition.T3]
    assert t2.passed and t2.lhs == pytest.approx(0.05) and t2.rhs == pytest.approx(1 / 1.01)
    assert t3.passed and t3.extras["ell"] == pytest.approx(2.375, abs=1e-9)


def test_t1_flagged_for_canonical_map(hyp_map, hyp_ladder):
    t1 = _by_condition(hy.check_T123(hyp_map, hyp_ladder))[Condition.T1]
    assert t1.lhs == pytest.approx(0.5 * 0.05 / (1 - 1 / 1.01), rel=1e-12)
    assert not t1.passed


def test_t2_fails_for_large_lambda_gap():
    reps = _by_condition(hy.check_T123(cm.hyperbolic(0.5, 3.0)))
    assert not reps[Condition.T2].passed


def test_sn_examples():
    good, bad = hy.check_SN(0.999, 2.0), hy.check_SN(0.95, 2.0)
    assert good.passed and good.lhs == pytest.approx(0.029734, rel=1e-4)
    assert not bad.passed and bad.lhs == pytest.approx(2.010376, rel=1e-6)
    assert good.rhs == 0.5


def test_ds_example():
    rep = hy.check_DS(0.999, 1.001, 2.0)
    beta_term = 4 * math.exp(2.0) * (1 - 1 / 1.001) / 1.001 ** -6
    assert rep.passed
    assert rep.lhs == pytest.approx(max(_sn_oracle(0.999, 2.0), beta_term), rel=1e-12)


@pytest.mark.parametrize("lam, beta", [(0.5, 1.1), (0.9, 1.6), (0.9, 1.0)])
def test_side_constraints(lam, beta):
    with pytest.raises(SideConstraintViolated):
        hy.check_DS(lam, beta, 1.0)
    if not 2 / 3 < lam < 1:
        with pytest.raises(SideConstraintViolated):
            hy.check_SN(lam, 1.0)


def test_expansion_budget_passing_point():
    # the window needs sqrt(s) well below tau: s = 1e-10, tau = 1e-5 passes
    m = cm.saddle_node(0.999, 1e-10)
    rep = hy.check_expansion_budget(m, 1e-5 + 1e-5)
    assert rep.passed and rep.lhs == 2.0
    oracle = (1 - 0.999) / (2e-5 + 1e-5) * math.exp(-m.distortion_K)
    assert rep.rhs == pytest.approx(oracle, rel=1e-9)


def test_expansion_budget_canonical_example_fails():
    # s = 1e-8, tau = 1e-5 lies outside the passing window
    m = cm.saddle_node(0.999, 1e-8)
    assert not hy.check_expansion_budget(m, 1e-4 + 1e-5).passed


def test_expansion_budget_window_edge():
    m = cm.saddle_node(0.999, 1e-10)
    with pytest.raises(OutOfWindow):
        hy.check_expansion_budget(m, 1e-5)
    with pytest.raises(OutOfWindow):
        hy.check_expansion_budget(cm.saddle_node(0.999, 0.0), 1e-3)


def test_expansion_budget_measured_ratio():
    m = cm.saddle_node(0.999, 1e-10)
    ld = build_ladder(m, 2e-5)
    rep = hy.check_expansion_budget(m, ld.t, ladder=ld)
    assert rep.extras["measured_ratio"] >= rep.extras["ell_lower_bound"] * 0.5


def test_passing_window_scan():
    rows = hy.passing_budget_window(cm.saddle_node(0.999, 1e-10), [1e-10, 1e-8], [1e-6, 1e-5])
    ok = {(s, tau): p for s, tau, p in rows}
    assert ok[(1e-10, 1e-5)] and ok[(1e-10, 1e-6)]
    assert not ok[(1e-8, 1e-5)]


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-7, 1e-3), st.floats(0.1, 0.9))
def test_budget_rhs_increases_as_tau_shrinks(tau, shrink):
    lam, s = 0.999, 1e-10
    assert hy.expansion_lower_bound(lam, s, tau * shrink) > hy.expansion_lower_bound(lam, s, tau)


def test_contraction_L(sn_map, sn_ladder):
    rep = hy.contraction_L(sn_map, sn_ladder)
    assert rep.passed and rep.lhs < 0.5
    assert rep.lhs == pytest.approx(0.002024, rel=1e-3)
    assert rep.lhs <= rep.extras["analytic_bound"]
    assert rep.extras["analytic_bound"] <= _sn_oracle(0.999, sn_map.distortion_K) < 0.5


def test_contraction_L_shift(sn_map, sn_ladder):
    l0 = hy.contraction_L(sn_map, sn_ladder, j=0).lhs
    l5 = hy.contraction_L(sn_map, sn_ladder, j=5).lhs
    assert l5 == pytest.approx(l0 * 0.999 ** 5, rel=1e-9)


def test_contraction_L_needs_sn():
    m = cm.saddle_node(0.95, 0.0)
    with pytest.raises(PreconditionFailed):
        hy.contraction_L(m, build_ladder(m, 1e-3))


def test_all_reports_dispatch(hyp_map, sn_map, sn_ladder, tp_map):
    assert {r.condition for r in hy.all_reports(hyp_map)} == {Condition.T2, Condition.T3}
    assert [r.condition for r in hy.all_reports(sn_map, sn_ladder)] == [Condition.SN, Condition.L_HALF]
    assert [r.condition for r in hy.all_reports(tp_map)] == [Condition.DS]


def test_report_serialisation():
    rep = hy.check_SN(0.999, 2.0)
    assert HypothesisReport.from_dict(rep.to_dict()) == rep
    rows = list(csv.reader(io.StringIO(hy.reports_csv([rep, hy.check_SN(0.95, 2.0)]))))
    assert rows[0] == list(hy.CSV_COLUMNS)
    assert [r[-1] for r in rows[1:]] == ["true", "false"]


@settings(max_examples=60, deadline=None)
@given(st.floats(0.67, 0.9999), st.floats(0.0, 5.0))
def test_reports_self_verifying(lam, K):
    rep = hy.check_SN(lam, K)
    assert rep.recheck() == rep.passed
    assert rep.margin == pytest.approx(rep.rhs - rep.lhs)
    assert rep.inputs == {"lambda": lam, "K": K}


@settings(max_examples=60, deadline=None)
@given(st.floats(0.67, 0.999), st.floats(0.0, 4.0), st.floats(0.0, 1.0), st.floats(0.0, 0.3))
def test_sn_monotone(lam, K, dK, dlam):
    base = hy.check_SN(lam, K)
    worse = hy.check_SN(max(lam - dlam, 0.6667), K + dK)
    if not base.passed:
        assert not worse.passed
