import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from snhc import central_maps as cm
from snhc import skew3d as sk
from snhc.domains import Check, build_ladder
from snhc.errors import (AccumulationNeeded, CrossesDiscontinuity, InvalidSpec, NotPerfect,
                         OutOfCube, OutsideGlueWindow, PreconditionFailed)
from snhc.return_maps import build_return_model, g_map, return_step_sided
from snhc.skew3d import Label, StripKind, StripSpec, Verdict

T_BOX = 0.01


@pytest.fixture(scope="module")
def hfam(hyp_map):
    return sk.make_family(hyp_map, 0.01)


@pytest.fixture(scope="module")
def phases():
    """Box sets of the two-parameter family at s = +1e-6, 0, -1e-6 (coarse grid)."""
    out = {}
    for s in (1e-6, 0.0, -1e-6):
        fam = sk.make_family(cm.two_param(0.999, 1.001, s), T_BOX)
        bs = sk.max_invariant_boxes(fam, 32, 1000)
        out[s] = (fam, sk.classify_boxes(fam, bs))
    return out


# -- family and pointwise maps -------------------------------------------------------------

def test_family_saddles(hfam):
    assert hfam.p == (0.0, 1.0, 0.0)
    assert hfam.saddles["Q"] == (0.0, 0.0, 0.0)
    fam = sk.make_family(cm.two_param(s=1e-4), T_BOX)
    assert fam.q == (0.0, -1.0, 0.0)
    assert fam.saddles["S"] == (0.0, 0.0, 0.0)
    assert fam.separatrix == pytest.approx(1e-2)
    assert sk.make_family(cm.two_param(s=0.0), T_BOX).separatrix == 0.0
    assert sk.make_family(cm.two_param(s=-1e-4), T_BOX).separatrix is None


def test_family_rates_dominate(hyp_map):
    d_m, d_M = hyp_map.certified_deriv_bounds
    fam = sk.make_family(hyp_map, 0.01)
    assert fam.lambda_s < d_m <= d_M < fam.lambda_u
    with pytest.raises(InvalidSpec):
        sk.make_family(hyp_map, 0.01, lambda_s=0.99)
    with pytest.raises(InvalidSpec):
        sk.make_family(hyp_map, 0.01, lambda_u=1.01)


def test_step_examples(hfam, hyp_map):
    assert sk.step(hfam, (0.0, 1.0, 0.0)) == (0.0, 1.0, 0.0)
    y = 0.3
    assert sk.step(hfam, (0.5, y, 0.1)) == (0.125, hyp_map.eval(y), 0.4)
    p = (0.3, 0.7, -0.2)
    q = sk.step_inv(hfam, sk.step(hfam, p))
    assert np.allclose(q, p, atol=1e-12, rtol=0)


def test_step_outside_cube(hfam):
    with pytest.raises(OutOfCube):
        sk.step(hfam, (1.5, 0.5, 0.0))
    with pytest.raises(OutOfCube):
        sk.step_inv(hfam, (0.5, 0.5, 0.0))


def test_central_line_invariant(hfam, hyp_map):
    for y in (-0.5, 0.2, 0.9, 1.5):
        assert sk.step(hfam, (0.0, y, 0.0)) == (0.0, hyp_map.eval(y), 0.0)


def test_glue_examples(hyp_map):
    for t in (0.01, 1e-3, 0.0):
        fam = sk.make_family(hyp_map, t)
        assert sk.glue(fam, (0.0, 1.0, -0.5)) == (-0.5, t, 0.0)
    fam = sk.make_family(hyp_map, 0.01)
    r = sk.GLUE_RADIUS
    sk.glue(fam, (r * 0.999, 1.0, -0.5))
    with pytest.raises(OutsideGlueWindow):
        sk.glue(fam, (r * 1.001, 1.0, -0.5))
    with pytest.raises(OutsideGlueWindow):
        sk.glue(fam, (0.0, 1.0, -0.5 + r * 1.001))


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.04, 0.04), st.floats(-0.04, 0.04), st.floats(-0.04, 0.04))
def test_glue_is_translation(dx, dy, dz):
    fam = sk.make_family(cm.hyperbolic(), 0.01)
    p = (dx, 1.0 + dy, -0.5 + dz)
    q = sk.glue(fam, p)
    assert q[0] == pytest.approx(dx - 0.5, abs=1e-15)
    assert q[1] == pytest.approx(dy + 0.01, abs=1e-15)
    assert q[2] == pytest.approx(dz, abs=1e-15)
    assert np.allclose(sk.unglue(fam, q), p, atol=1e-15, rtol=0)


# -- orbits -------------------------------------------------------------------------------------

def test_orbit_of_p_is_constant(hfam):
    rec = sk.orbit(hfam, hfam.p, 50)
    assert not rec.exited
    assert np.all(rec.points == np.array(hfam.p))


def test_homoclinic_witness_forward(hfam):
    rec = sk.orbit(hfam, (-0.5, 0.01, 0.0), 10_000)
    dist = np.max(np.abs(rec.points - np.array(hfam.p)), axis=1)
    assert not rec.exited
    assert dist.min() < 1e-6
    assert int(np.argmax(dist < 1e-6)) == 625


def test_homoclinic_witness_backward(hfam):
    rec = sk.orbit(hfam, (-0.5, 0.01, 0.0), 40, backward=True)
    pts = rec.points
    assert tuple(pts[1]) == (0.0, 1.0, -0.5)
    inside = pts[1:-1] if rec.exited else pts[1:]
    assert np.all(inside[:, 1] == 1.0)
    assert np.allclose(inside[1:, 2] / inside[:-1, 2], 1 / hfam.lambda_u, rtol=1e-12)


def test_upper_central_points_exit_backward(hfam):
    fwd = sk.orbit(hfam, (0.0, 1.5, 0.0), 2000)
    bwd = sk.orbit(hfam, (0.0, 1.5, 0.0), 2000, backward=True)
    assert not fwd.exited
    assert bwd.exited and bwd.exit_face == "y+"


def test_orbit_regions_and_csv(hfam):
    rec = sk.orbit(hfam, (-0.5, 0.01, 0.0), 800, record_region=True)
    assert rec.regions[-1] == "P"
    rows = list(csv.reader(io.StringIO(rec.to_csv())))
    assert rows[0] == ["n", "x", "y", "z", "event"]
    assert rows[1][-1] == "start"
    back = sk.orbit(hfam, (-0.5, 0.01, 0.0), 3, backward=True)
    assert [r[0] for r in csv.reader(io.StringIO(back.to_csv()))][1:] == ["0", "-1", "-2", "-3"]


@settings(max_examples=40, deadline=None)
@given(st.floats(-0.9, 0.9, allow_subnormal=False), st.floats(0.2, 0.8),
       st.floats(-0.01, 0.01, allow_subnormal=False), st.integers(1, 3))
def test_product_structure(x, y, z, n):
    fam = sk.make_family(cm.hyperbolic(), 0.01)
    rec = sk.orbit(fam, (x, y, z), n)
    if rec.exited or "glue" in rec.events:
        return
    if abs(x) > 1e-300:  # keep the scaled value normal
        assert rec.points[n][0] / x == pytest.approx(fam.lambda_s ** n, rel=1e-12)
    if abs(z) > 1e-300:
        assert rec.points[n][2] / z == pytest.approx(fam.lambda_u ** n, rel=1e-12)


# -- strips and witnesses -------------------------------------------------------------------------

def _full_strip(model):
    a, b = model.d_plus
    eps = 1e-12 * (b - a)
    return StripSpec.make(0.0, (a + eps, b - eps), (-1.0, 1.0), model.d_plus)


def _middle_third(model, j=3):
    br = [b for b in model.branches if b.onto][j]
    lo, hi = br.interval
    L = hi - lo
    return StripSpec.make(0.1, (lo + L / 3, hi - L / 3), (-1.0, 1.0), model.d_plus), br


def test_strip_flags(hyp_model):
    a, b = hyp_model.d_plus
    s = StripSpec.make(0.0, (a, b), (-1.0, 1.0), hyp_model.d_plus)
    assert s.complete and not s.well_located and not s.perfect
    s = StripSpec.make(0.0, (a + 1e-9, b - 1e-9), (-0.5, 1.0), hyp_model.d_plus)
    assert s.well_located and not s.complete
    with pytest.raises(ValueError):
        StripSpec.make(0.0, (b, a), (-1.0, 1.0), hyp_model.d_plus)
    with pytest.raises(ValueError):
        StripSpec.make(0.0, (a, b), (0.1, 1.0), hyp_model.d_plus)


def test_strip_successor_single_branch(hfam, hyp_model):
    strip, br = _middle_third(hyp_model)
    nxt = sk.strip_successor(hfam, hyp_model, strip, StripKind.R_KIND)
    assert nxt.perfect and nxt.complete
    oracle_x = hfam.lambda_s ** br.index * (hfam.lambda_s ** hyp_model.k * strip.x1 - 0.5)
    assert nxt.x1 == pytest.approx(oracle_x, rel=1e-12)
    g = sk.strip_successor(hfam, hyp_model, strip, "G_KIND")
    assert g.x1 == pytest.approx(hfam.lambda_s ** hyp_model.k * 0.1 - 0.5)
    assert g.y_interval.lo == pytest.approx(g_map(hyp_model, strip.y_interval.lo))


def test_strip_successor_errors(hfam, hyp_model):
    br = [b for b in hyp_model.branches if b.onto][3]
    lo, hi = br.interval
    across = StripSpec.make(0.0, (lo - 1e-9, lo + 1e-9), (-1.0, 1.0), hyp_model.d_plus)
    with pytest.raises(CrossesDiscontinuity):
        sk.strip_successor(hfam, hyp_model, across, StripKind.R_KIND)
    a, b = hyp_model.d_plus
    flat = StripSpec.make(0.0, (a + 1e-9, b - 1e-9), (-0.5, 0.5), hyp_model.d_plus)
    with pytest.raises(NotPerfect):
        sk.strip_successor(hfam, hyp_model, flat, StripKind.R_KIND)


def test_chained_successors_reach_stable_set(hfam, hyp_model):
    strip, _ = _middle_third(hyp_model)
    bound = sk.covering_steps_bound(hyp_model, tuple(strip.y_interval))
    for k in range(bound + 1):
        try:
            strip = sk.strip_successor(hfam, hyp_model, strip, StripKind.R_KIND)
        except CrossesDiscontinuity:
            break
    else:
        pytest.fail("no discontinuity within the covering bound")
    assert k <= bound


def test_stable_witness_full_domain(hfam, hyp_model):
    w = sk.stable_Q_witness(hfam, hyp_model, _full_strip(hyp_model))
    assert w.k <= 1
    assert w.residual < 1e-8 * hfam.t


def test_stable_witness_middle_third(hfam, hyp_model):
    strip, _ = _middle_third(hyp_model)
    w = sk.stable_Q_witness(hfam, hyp_model, strip)
    assert w.k <= sk.covering_steps_bound(hyp_model, tuple(strip.y_interval))
    assert strip.y_interval.lo < w.point[1] < strip.y_interval.hi
    y = w.point[1]
    for _ in range(w.k):
        y = return_step_sided(hyp_model, y, "RIGHT").y
    assert abs(g_map(hyp_model, y)) < 1e-8 * hfam.t


def test_stable_witness_two_param(tp_map, tp_model):
    fam = sk.make_family(tp_map, 1e-3)
    w = sk.stable_Q_witness(fam, tp_model, _full_strip(tp_model))
    assert w.k == 0
    assert tp_model.d_plus.lo <= w.point[1] <= tp_model.d_plus.hi
    assert w.residual < 1e-12


def test_stable_witness_needs_perfect(hfam, hyp_model):
    a, b = hyp_model.d_plus
    with pytest.raises(NotPerfect):
        sk.stable_Q_witness(hfam, hyp_model, StripSpec.make(0.0, (a, b), (-1, 1), hyp_model.d_plus))


def test_perfect_segment_witness(hfam, hyp_model):
    seg = sk.perfect_segment_witness(hfam, hyp_model)
    assert seg.perfect
    assert seg.z_interval == (-1.0, 1.0)
    assert seg.y_interval.lo == seg.y_interval.hi
    a, b = hyp_model.d_plus
    assert a < seg.y_interval.lo < b
    assert seg.y_interval.lo == pytest.approx(0.009930, abs=1e-6)


def test_perfect_segment_endpoint_case(hyp_map):
    # tune t so that the orbit of t enters the minus domain exactly at its left end
    def entry(t):
        ld = build_ladder(hyp_map, t, check=Check.NONE)
        return hyp_map.first_entry_time(t, tuple(ld.d_minus))

    lo, hi = 0.0100, 0.0105
    n_lo = entry(lo)
    assert entry(hi) != n_lo
    while hi - lo > 1e-16:
        mid = 0.5 * (lo + hi)
        if entry(mid) == n_lo:
            lo = mid
        else:
            hi = mid
    # at the tuned t the plus domain touches its edge, so invariant checks are off
    ld = build_ladder(hyp_map, hi, check=Check.NONE)
    model = build_return_model(hyp_map, ld, max_branches=8)
    with pytest.raises(AccumulationNeeded):
        sk.perfect_segment_witness(sk.make_family(hyp_map, hi), model)


def test_rectangle_return(hfam):
    r = sk.rectangle_return(hfam, 0.3, 200)
    assert r.passed and r.checks == (True, True, True)
    m = hfam.central
    assert 1 - hfam.t + 1 / 200 < m.iterate(1 / 200, r.i) < 1
    assert not 1 - hfam.t + 1 / 200 < m.iterate(1 / 200, r.i - 1) < 1
    assert r.i == 529
    with pytest.raises(PreconditionFailed):
        sk.rectangle_return(hfam, 0.3, 100)


# -- boxes ------------------------------------------------------------------------------------------

def test_three_phase_verdicts(phases):
    assert phases[1e-6][1].verdict is Verdict.DISJOINT
    assert phases[0.0][1].verdict is Verdict.TOUCH_AT_S
    assert phases[-1e-6][1].verdict is Verdict.MERGED
    assert phases[0.0][1].contacts["plus_minus"] == phases[0.0][1].contacts["plus_minus_at_s"]


def test_saddle_boxes_retained(phases):
    for fam, bs in phases.values():
        for name in ("P", "Q", "S"):
            assert len(bs.containing(fam.saddles[name])) > 0


def test_labels_partition(phases):
    for _, bs in phases.values():
        counts = bs.counts()
        assert sum(counts.values()) == len(bs)
        assert counts["UNRESOLVED"] == 0


def test_neck_interior_not_recurrent(phases):
    fam, bs = phases[1e-6]
    r = math.sqrt(1e-6)
    c = bs.centers()
    near = (np.abs(c[:, 0]) < 0.05) & (np.abs(c[:, 2]) < 0.05) & (np.abs(c[:, 1]) < 0.5 * r)
    assert near.any()
    assert np.all(bs.mask(Label.WANDERING)[near])


def test_plus_boxes_stay_above_separatrix(phases):
    fam, bs = phases[1e-6]
    idx = np.flatnonzero(bs.mask(Label.LAMBDA_PLUS))
    pts = sk.box_samples(bs, idx)
    exit_at, back_above, *_ = sk.sample_orbits(fam, pts, 1000)
    assert not np.any(back_above)


def test_refinement_nests():
    fam = sk.make_family(cm.two_param(0.999, 1.001, 1e-6), T_BOX)
    coarse = sk.max_invariant_boxes(fam, 16, 1000)
    fine = sk.max_invariant_boxes(fam, 32, 1000)
    for c in fine.centers():
        assert len(coarse.containing(c)) > 0


def test_non_transitivity(phases):
    fam, bs = phases[0.0]
    rep = sk.non_transitivity_check(fam, bs)
    assert rep.passed and rep.samples > 0 and rep.q_to_p_to_q == 0


def test_box_exports(phases):
    _, bs = phases[0.0]
    rows = list(csv.reader(io.StringIO(bs.to_csv())))
    assert rows[0] == ["ix", "iy", "iz", "label"]
    assert len(rows) == len(bs) + 1
    doc = json.loads(bs.summary_json())
    assert doc["verdict"] == "TOUCH_AT_S"
    assert sum(doc["counts"].values()) == len(bs)


def test_resolution_must_be_positive():
    fam = sk.make_family(cm.two_param(0.999, 1.001, 0.0), T_BOX)
    with pytest.raises(ValueError):
        sk.max_invariant_boxes(fam, 4, 10)
