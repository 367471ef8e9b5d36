import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from snhc import central_maps as cm
from snhc.central_maps import CentralMapSpec, Direction, PieceKind, Regime
from snhc.errors import (FixedPointCountMismatch, InvalidSpec, IterationBudgetExceeded,
                         NonMonotoneBlend, OrbitLeftDomain, OutOfDomain, OutOfRange,
                         SideConstraintViolated)

# s values kept inside the quadratic zone (|s| < delta^2) for the default delta
S_VALUES = st.floats(min_value=-5e-3, max_value=5e-3, allow_nan=False)


def _grid(m, n=10_000):
    lo, hi = m.domain
    return np.linspace(lo, hi, n)


def _all_maps():
    return [cm.hyperbolic(), cm.saddle_node(), cm.saddle_node(s=4e-4),
            cm.two_param(), cm.two_param(s=-1e-3), cm.two_param(s=1e-2)]


# -- construction ------------------------------------------------------------

def test_hyperbolic_local_forms():
    m = cm.hyperbolic(0.95, 1.01, 0.1)
    assert [(f.x, f.slope, f.stability) for f in m.fixed_points()] == [
        (0.0, 1.01, "repellor"), (1.0, 0.95, "attractor")]
    assert m.deriv(0.0) == 1.01
    assert m.deriv(1.0) == 0.95


def test_saddle_node_fixed_points_split_at_positive_s():
    m = cm.saddle_node(0.999, 4e-4, 0.1)
    xs = [f.x for f in m.fixed_points()]
    assert xs == pytest.approx([-0.02, 0.02, 1.0], abs=1e-15)
    assert m.eval(0.02) == pytest.approx(0.02, abs=1e-17)


def test_saddle_node_distortion_at_least_two():
    # |x + x^2|'' / |x + x^2|' = 2 / (1 + 2x) equals 2 at the parabolic point
    m = cm.saddle_node(0.999, 0.0)
    assert m.distortion_K >= 2.0
    assert m.distortion_on(0.0, 1.0) >= 2.0


def test_distortion_constants_frozen():
    # derived from the default blends; frozen so regressions in the blend show up
    assert cm.hyperbolic().distortion_K == pytest.approx(0.29, abs=1e-3)
    assert cm.saddle_node().distortion_K == pytest.approx(2.1, abs=1e-9)
    assert cm.two_param().distortion_K == pytest.approx(2.625, abs=1e-9)


def test_two_param_fixed_points_by_sign_of_s():
    assert [f.x for f in cm.two_param(s=-1e-3).fixed_points()] == [-1.0, 1.0]
    assert [f.x for f in cm.two_param(s=0.0).fixed_points()] == [-1.0, 0.0, 1.0]
    xs = [f.x for f in cm.two_param(s=1e-2).fixed_points()]
    assert xs == pytest.approx([-1.0, -0.1, 0.1, 1.0], abs=1e-14)
    assert cm.two_param(s=-1e-3).fixed_points()[0].slope == 1.001


def test_saddle_node_parabolic_label():
    fps = cm.saddle_node(s=0.0).fixed_points()
    assert (0.0, 1.0, "parabolic") in [(f.x, f.slope, f.stability) for f in fps]
    assert [f.x for f in cm.saddle_node(s=-1e-4).fixed_points()] == [1.0]


def test_pieces_tile_domain_and_include_mandated_kinds():
    for m in _all_maps():
        lo, hi = m.domain
        assert m.pieces[0].lo == lo and m.pieces[-1].hi == hi
        for p, q in zip(m.pieces, m.pieces[1:]):
            assert p.hi == q.lo
    kinds = {p.kind for p in cm.saddle_node().pieces}
    assert PieceKind.QUADRATIC_SN in kinds and PieceKind.AFFINE in kinds


@pytest.mark.parametrize("spec, err", [
    (dict(regime="HYPERBOLIC", lam=1.2), InvalidSpec),
    (dict(regime="HYPERBOLIC", lam=0.9, beta=0.9), InvalidSpec),
    (dict(regime="HYPERBOLIC", lam=0.9, delta=-1.0), InvalidSpec),
    (dict(regime="SADDLE_NODE", lam=0.5), SideConstraintViolated),
    (dict(regime="TWO_PARAM", lam=0.9, beta=1.6), SideConstraintViolated),
])
def test_invalid_specs_rejected(spec, err):
    with pytest.raises(err):
        cm.build_central_map(CentralMapSpec(**spec))


def test_blend_knot_validation():
    base = cm.default_blend_knots(CentralMapSpec("SADDLE_NODE", 0.999))
    with pytest.raises(NonMonotoneBlend):
        knots = tuple(sorted(base + ((0.5, 0.12, 0.001),)))
        cm.build_central_map(CentralMapSpec("SADDLE_NODE", 0.999, blend_knots=knots))
    with pytest.raises(InvalidSpec):
        knots = tuple(sorted(base + ((0.5, 0.05, 1.0),)))
        cm.build_central_map(CentralMapSpec("SADDLE_NODE", 0.999, blend_knots=knots))


def test_fixed_point_count_mismatch_outside_quadratic_zone():
    # |s| >= delta^2 pushes +-sqrt(s) out of the quadratic piece
    with pytest.raises((FixedPointCountMismatch, InvalidSpec)):
        cm.saddle_node(0.999, 0.04, 0.1)


def test_spec_json_roundtrip():
    for m in _all_maps():
        spec = m.spec
        again = CentralMapSpec.from_json(spec.to_json())
        assert again.to_json() == spec.to_json()
        m2 = cm.build_central_map(again)
        xs = _grid(m, 101)
        assert np.array_equal(m.eval_many(xs), m2.eval_many(xs))


# -- evaluation ----------------------------------------------------------------

def test_eval_examples():
    assert cm.saddle_node().eval(0.0) == 0.0
    assert cm.hyperbolic().eval(0.01) == pytest.approx(0.0101, rel=1e-15)


def test_deriv_examples():
    m = cm.saddle_node(0.999, 1e-4)
    assert m.deriv(0.0) == 1.0
    assert m.deriv(1.0) == pytest.approx(0.999, abs=1e-15)
    for x in (-0.09, 0.0, 0.05):
        assert m.second_deriv(x) == 2.0


def test_eval_outside_domain():
    m = cm.hyperbolic()
    with pytest.raises(OutOfDomain):
        m.eval(3.0)
    with pytest.raises(OutOfDomain):
        m.deriv(-2.0)


def test_inverse_examples():
    m0 = cm.saddle_node()
    assert m0.inverse(0.0) == 0.0
    assert cm.hyperbolic(0.95).inverse(1 - 0.95 * 0.01) == pytest.approx(0.99, abs=1e-15)
    # closed form of x + x^2 = y; 0.0101 = 0.01 + 0.01^2 exactly
    y = 0.0101
    oracle = (-1 + math.sqrt(1 + 4 * y)) / 2
    assert m0.inverse(y) == pytest.approx(oracle, rel=1e-12)


def test_inverse_outside_range():
    with pytest.raises(OutOfRange):
        cm.hyperbolic().inverse(5.0)


def test_iterate_examples():
    m = cm.saddle_node(delta=0.15)  # quadratic zone covers 0.11
    assert m.iterate(0.1, 0) == 0.1
    assert m.iterate(0.1, 2) == pytest.approx(0.1221, rel=1e-14)
    x = m.iterate(0.3, 40)
    assert m.iterate(x, -40) == pytest.approx(0.3, abs=1e-10)


def test_iterate_reports_exit_step():
    with pytest.raises(OrbitLeftDomain) as exc:
        cm.hyperbolic().iterate(1.9, -50)
    assert exc.value.step < 0


def test_first_entry_time_examples():
    m = cm.hyperbolic(0.95, 1.01)
    target = (0.99, 0.9905)
    assert m.first_entry_time(0.9902, target) == 0
    n = m.first_entry_time(0.5, target)
    assert n == 90
    assert target[0] <= m.iterate(0.5, n) <= target[1]
    assert not target[0] <= m.iterate(0.5, n - 1) <= target[1]
    with pytest.raises(IterationBudgetExceeded):
        m.first_entry_time(0.5, (2.0, 3.0), cap=1000)


def test_first_entry_backward():
    m = cm.hyperbolic(0.95, 1.01)
    n = m.first_entry_time(0.9902, (0.009, 0.01), Direction.BACKWARD)
    assert 0.009 <= m.iterate(0.9902, -n) <= 0.01


# -- invariants -------------------------------------------------------------------

@pytest.mark.parametrize("m", _all_maps(), ids=lambda m: f"{m.spec.regime.value}-{m.spec.s}")
def test_strict_monotonicity_on_grid(m):
    assert np.all(np.diff(m.eval_many(_grid(m))) > 0)


@pytest.mark.parametrize("m", _all_maps(), ids=lambda m: f"{m.spec.regime.value}-{m.spec.s}")
def test_c1_junctions(m):
    for p in m.pieces[1:]:
        b = p.lo
        assert abs(m.eval(math.nextafter(b, -math.inf)) - m.eval(b)) < 1e-12
        assert abs(m.deriv(b - 1e-13) - m.deriv(b + 1e-13)) < 1e-9


@pytest.mark.parametrize("m", _all_maps(), ids=lambda m: f"{m.spec.regime.value}-{m.spec.s}")
def test_inverse_of_eval_on_grid(m):
    xs = _grid(m)
    assert np.max(np.abs(m.inverse_many(m.eval_many(xs)) - xs)) < 1e-10


@pytest.mark.parametrize("m", _all_maps(), ids=lambda m: f"{m.spec.regime.value}-{m.spec.s}")
def test_certified_bounds_hold_on_core(m):
    d_m, d_M = m.certified_deriv_bounds
    lo, hi = m.core_interval
    ders = m.deriv_many(np.linspace(lo, hi, 10_000))
    assert 0 < d_m <= ders.min() and ders.max() <= d_M


@settings(max_examples=25, deadline=None)
@given(S_VALUES)
def test_saddle_node_fixed_point_count(s):
    m = cm.saddle_node(0.999, s)
    assert len(m.fixed_points()) == cm.expected_fixed_point_count(m.spec)
    expected = 3 if s > 0 else (2 if s == 0 else 1)
    assert len(m.fixed_points()) == expected


@settings(max_examples=25, deadline=None)
@given(S_VALUES)
def test_two_param_affine_ends_independent_of_s(s):
    m = cm.two_param(0.999, 1.001, s)
    assert m.eval(-1.0) == -1.0 and m.eval(1.0) == 1.0
    assert m.deriv(-1.05) == pytest.approx(1.001, abs=1e-15)
    assert m.deriv(1.05) == pytest.approx(0.999, abs=1e-15)
    assert len(m.fixed_points()) == (4 if s > 0 else (3 if s == 0 else 2))


@settings(max_examples=50, deadline=None)
@given(st.floats(-1.0, 2.0), st.floats(-1.0, 2.0))
def test_eval_monotone_property(x, y):
    m = cm.hyperbolic()
    if x < y:
        assert m.eval(x) < m.eval(y)


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.09, 0.09), S_VALUES)
def test_quadratic_piece_exact(x, s):
    m = cm.saddle_node(0.999, s)
    assert m.eval(x) == pytest.approx(x + x * x - s, abs=1e-16)
    assert m.deriv(x) == pytest.approx(1 + 2 * x, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.9), st.integers(1, 30))
def test_iterate_roundtrip_property(x, n):
    m = cm.hyperbolic()
    y = m.iterate(x, n)
    assert m.iterate(y, -n) == pytest.approx(x, abs=1e-10)


def test_regime_enum_values():
    assert {r.value for r in Regime} == {"HYPERBOLIC", "SADDLE_NODE", "TWO_PARAM"}
