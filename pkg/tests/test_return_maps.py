import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from snhc import return_maps as rm
from snhc.domains import LadderRegime
from snhc.errors import AtDiscontinuity, ExpansionFloorViolated, IterationBudgetExceeded, OutOfDomain
from snhc.return_maps import Side


def _interior(model):
    return [b for b in model.branches if b.onto]


def _disc(model, j):
    return model.discontinuities[j][1]


# -- structure -------------------------------------------------------------------

@pytest.mark.parametrize("name", ["hyp_model", "sn_model"])
def test_discontinuities_decrease_and_branches_tile(name, request):
    model = request.getfixturevalue(name)
    ds = [d for _, d in model.discontinuities]
    idx = [i for i, _ in model.discontinuities]
    assert all(a > b for a, b in zip(ds, ds[1:]))
    assert idx == list(range(idx[0], idx[0] + len(idx)))
    assert all(model.d_plus.lo < d < model.d_plus.hi for d in ds)
    brs = model.branches
    assert brs[0].interval.hi == model.d_plus.hi
    for a, b in zip(brs, brs[1:]):
        assert b.interval.hi == a.interval.lo
        assert b.index == a.index + 1
    assert model.covered.lo == brs[-1].interval.lo


def test_first_branch_index_positive(hyp_model, sn_model):
    assert hyp_model.i_bounds[0] >= 1
    assert sn_model.i_bounds[0] >= 1


def test_frozen_branch_data(hyp_model, sn_model):
    # derived by direct enumeration, then frozen
    assert hyp_model.i_bounds == (300, 1323)
    assert hyp_model.ell_cert == pytest.approx(92.86, rel=1e-3)
    assert sn_model.i_bounds == (999006, 1000029)
    assert sn_model.ell_cert == pytest.approx(9.516e5, rel=1e-3)
    assert sn_model.truncated_at == sn_model.i_bounds[1]


def test_two_param_indices_finite(tp_model):
    i1, i2 = tp_model.i_bounds
    assert 1 <= i1 <= i2
    assert tp_model.finite
    assert tp_model.regime is LadderRegime.TWO_PARAM


def test_onto_residuals_hyperbolic(hyp_model):
    assert max(rm.onto_residuals(hyp_model)) < 1e-9


def test_onto_residuals_saddle_node_sample(sn_model):
    assert max(rm.onto_residuals(sn_model, limit=6)) < 1e-9


@pytest.mark.parametrize("name", ["hyp_model", "sn_model"])
def test_discontinuity_targets(name, request):
    model = request.getfixturevalue(name)
    assert max(rm.discontinuity_residuals(model)) < 1e-8 * model.ladder.t


# -- transition and g ------------------------------------------------------------

@pytest.mark.parametrize("name", ["hyp_model", "sn_model"])
def test_transition_endpoints(name, request):
    model = request.getfixturevalue(name)
    ld = model.ladder
    t, lam = ld.t, model.map.spec.lam
    a, b = ld.d_plus
    assert rm.transition(model, a) == pytest.approx(1 - t, abs=1e-9 * t)
    assert rm.transition(model, b) == pytest.approx(1 - lam * t, abs=1e-9 * t)
    mid = rm.transition(model, (a + b) / 2)
    assert ld.d_minus.lo < mid < ld.d_minus.hi


def test_transition_outside_domain(hyp_model):
    with pytest.raises(OutOfDomain):
        rm.transition(hyp_model, 0.5)


def test_g_range_hyperbolic(hyp_model):
    a, b = hyp_model.d_plus
    assert rm.g_map(hyp_model, a) == pytest.approx(0.0, abs=1e-12)
    assert rm.g_map(hyp_model, b) == pytest.approx(5e-4, abs=1e-12)


def test_g_range_saddle_node_left_geometry(sn_model):
    a, b = sn_model.d_plus
    assert rm.g_map(sn_model, a) == pytest.approx(0.0, abs=1e-8 * sn_model.ladder.t)
    xs = np.linspace(a, b, 50)
    gs = [rm.g_map(sn_model, x) for x in xs]
    assert max(gs) < a
    assert min(gs[1:]) > 0


def test_g_range_two_param(tp_model):
    t = 1e-3
    a, b = tp_model.d_plus
    for x in np.linspace(a, b, 20):
        assert -2 * t <= rm.g_map(tp_model, x) <= -t


# -- return step -------------------------------------------------------------------

def test_bivaluation_at_discontinuity(hyp_model):
    a, b = hyp_model.d_plus
    j = 5
    d = _disc(hyp_model, j)
    with pytest.raises(AtDiscontinuity):
        rm.return_step(hyp_model, d)
    right = rm.return_step_sided(hyp_model, d, Side.RIGHT)
    left = rm.return_step_sided(hyp_model, d, Side.LEFT)
    assert right.y == pytest.approx(a, abs=1e-9 * (b - a))
    assert left.y == pytest.approx(b, abs=1e-9 * (b - a))
    assert left.i_of_x == right.i_of_x + 1


def test_one_sided_limits(hyp_model):
    a, b = hyp_model.d_plus
    d = _disc(hyp_model, 5)
    eps = 1e-6 * (_disc(hyp_model, 4) - d)
    assert rm.return_step(hyp_model, d + eps).y - a < 1e-3 * (b - a)
    assert b - rm.return_step(hyp_model, d - eps).y < 1e-3 * (b - a)


@pytest.mark.parametrize("name", ["hyp_model", "sn_model"])
def test_g_of_return_at_discontinuity_vanishes(name, request):
    model = request.getfixturevalue(name)
    t = model.ladder.t
    for j in (1, 2, len(model.discontinuities) // 2):
        y = rm.return_step_sided(model, _disc(model, j), Side.RIGHT).y
        assert abs(rm.g_map(model, y)) < 1e-8 * t


@pytest.mark.parametrize("name", ["hyp_model", "sn_model"])
def test_return_step_minimal_and_in_bounds(name, request):
    model = request.getfixturevalue(name)
    m, (a, b) = model.map, model.d_plus
    lo = model.covered.lo
    for x in np.linspace(lo, b, 13)[1:-1]:
        step = rm.return_step(model, x)
        i = step.i_of_x
        assert model.i_bounds[0] <= i <= model.i_bounds[1]
        assert a <= step.y <= b
        g = rm.g_map(model, x)
        assert m.iterate(g, i - 1) < a


def test_return_derivative_one_sided_floor(hyp_model):
    floor = rm.default_floor(hyp_model)
    for j in range(1, 6):
        d = _disc(hyp_model, j)
        eps = 1e-9 * hyp_model.d_plus.length
        assert rm.return_deriv(hyp_model, d + eps) > floor
        assert rm.return_deriv(hyp_model, d - eps) > floor


def test_branch_apply_inverse(hyp_model):
    br = _interior(hyp_model)[2]
    x = br.interval.mid
    y = rm.branch_apply(hyp_model, x, br.index)
    assert rm.branch_inverse(hyp_model, y, br.index) == pytest.approx(x, abs=1e-15)
    assert rm.tile_of(hyp_model, x) == br.tile


# -- expansion -------------------------------------------------------------------------

def test_hyperbolic_floor_is_t3_ell(hyp_model):
    assert rm.default_floor(hyp_model) == pytest.approx(2.375, abs=1e-12)
    assert rm.min_expansion(hyp_model) > 2.375


def test_saddle_node_expansion(sn_model):
    assert rm.min_expansion(sn_model) > 1


def test_floor_violation_carries_witness(hyp_model):
    with pytest.raises(ExpansionFloorViolated) as exc:
        rm.min_expansion(hyp_model, floor=1e6)
    assert hyp_model.d_plus.lo <= exc.value.witness <= hyp_model.d_plus.hi


@pytest.mark.parametrize("name", ["hyp_model", "sn_model"])
def test_transition_distortion_sandwich(name, request):
    model = request.getfixturevalue(name)
    d = rm.transition_derivs(model, 200)
    K = model.map.distortion_K
    ratio = d.max() / d.min()
    assert math.exp(-K) <= 1 / ratio and ratio <= math.exp(K)


def test_two_param_bounds_reported(tp_model):
    bound = rm.two_param_transition_bound(tp_model)
    assert bound > rm.TWO_PARAM_TRANSITION_CONSTANT
    assert rm.transition_min_derivative(tp_model) > 1


# -- covering -----------------------------------------------------------------------------

def test_hit_discontinuity_containing(hyp_model):
    br = _interior(hyp_model)[3]
    hit = rm.hit_discontinuity(hyp_model, (br.interval.lo - 1e-9, br.interval.hi))
    assert hit.k == 0 and hit.index == br.index


def test_hit_discontinuity_middle_third(hyp_model):
    br = _interior(hyp_model)[3]
    lo, hi = br.interval
    L = hi - lo
    J = (lo + L / 3, hi - L / 3)
    hit = rm.hit_discontinuity(hyp_model, J)
    assert hit.k <= hit.bound
    assert J[0] < hit.x < J[1]
    y = hit.x
    for _ in range(hit.k):
        y = rm.return_step_sided(hyp_model, y, Side.RIGHT).y
    y = rm.return_step_sided(hyp_model, y, Side.RIGHT).y
    assert abs(rm.g_map(hyp_model, y)) < 1e-8 * hyp_model.ladder.t


def test_hit_discontinuity_nearly_full(hyp_model):
    a, b = hyp_model.d_plus
    L = b - a
    assert rm.hit_discontinuity(hyp_model, (a + 1e-6 * L, b - 1e-6 * L)).k in (0, 1)


def test_hit_discontinuity_rejects_outside(hyp_model):
    with pytest.raises(OutOfDomain):
        rm.hit_discontinuity(hyp_model, (0.0, 1.0))


def test_full_cover_time_examples(hyp_model, tp_model):
    assert rm.full_cover_time(tp_model, tuple(tp_model.d_plus)) in (0, 1)
    two = (_disc(hyp_model, 4) - 1e-12, _disc(hyp_model, 3) + 1e-12)
    assert rm.full_cover_time(hyp_model, two) == 1


def test_full_cover_time_budget(tp_model):
    br = tp_model.branches[0]
    lo, hi = br.interval
    with pytest.raises(IterationBudgetExceeded):
        rm.full_cover_time(tp_model, (lo + 0.45 * (hi - lo), lo + 0.55 * (hi - lo)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1000), st.floats(0.05, 0.95), st.floats(0.01, 0.5))
def test_hit_discontinuity_bound_property(hyp_model, b_idx, centre, frac):
    brs = _interior(hyp_model)
    br = brs[b_idx % len(brs)]
    lo, hi = br.interval
    L = hi - lo
    half = frac * L * min(centre, 1 - centre)
    c = lo + centre * L
    hit = rm.hit_discontinuity(hyp_model, (c - half, c + half))
    assert hit.k <= hit.bound


# -- exports ------------------------------------------------------------------------------

def test_exports(hyp_model):
    doc = json.loads(hyp_model.to_json())
    assert doc["i_bounds"] == [300, 1323]
    assert len(doc["discontinuities"]) == len(hyp_model.discontinuities)
    rows = list(csv.reader(io.StringIO(hyp_model.branch_table_csv())))
    assert rows[0] == ["index", "left", "right", "image_left", "image_right", "min_deriv"]
    assert len(rows) == len(hyp_model.branches) + 1
