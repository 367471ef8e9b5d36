"""Transition, glued transition and return maps on the plus domain.

Given a ladder with plus domain ``[a, b]`` (``b = F(a)``) and transition
count ``k``, the transition is ``T = F^k`` from the plus to the minus
domain, the glued map is ``G = T + t - 1`` and the return map sends ``x``
to the first forward image of ``G(x)`` that enters ``[a, b]``.  The
return map is increasing on each branch and jumps at the points ``d_i``
with ``G(d_i) = F^{-i}(a)``.
"""

from __future__ import annotations

import bisect
import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as kern
from .central_maps import CentralMap, K_SAFETY
from .certify import DEFAULT_POLICY, Policy, less_equal
from .domains import DomainLadder, LadderRegime
from .errors import (
    AtDiscontinuity,
    BranchResolutionFailure,
    ExpansionFloorViolated,
    IterationBudgetExceeded,
    OutOfDomain,
)
from .interval import Interval

# consecutive discontinuities must be separated by this many ulps of the
# glued coordinate, otherwise binary64 cannot place them reliably
RESOLUTION_ULPS = 16
DEFAULT_MAX_BRANCHES = 1024
DEFAULT_RETURN_CAP = 200_000_000
SAMPLES_PER_BRANCH = 8
TWO_PARAM_RETURN_FLOOR = 3.0
TWO_PARAM_TRANSITION_CONSTANT = 61.0


class Side(str, enum.Enum):
    """Side from which a discontinuity is approached."""

    LEFT = "LEFT"    # x -> d_i from below: the value is b
    RIGHT = "RIGHT"  # x -> d_i from above (and at d_i itself): the value is a


@dataclass(frozen=True)
class Branch:
    """One continuity interval of the return map.

    Attributes:
        tile: Position in the tiling, 0 for the branch ending at b.
        index: The number of central iterates i(x) used on the branch.
        interval: The branch; closed on the left, open on the right except
            for the top branch which contains b.
        onto: Whether the branch is mapped onto the whole plus domain.
        image: Image interval (right end as a one-sided limit).
        min_deriv: Smallest sampled derivative of the return map.
    """

    tile: int
    index: int
    interval: Interval
    onto: bool
    image: Interval
    min_deriv: float


@dataclass(frozen=True)
class ReturnStep:
    y: float
    i_of_x: int
    branch: int


@dataclass(frozen=True, eq=False)
class ReturnMapModel:
    """Transition/return system at one parameter point.

    Attributes:
        regime: Ladder flavour.
        ladder: Domains and counters.
        map: Central map.
        g_offset: Additive constant of the glued map (t - 1).
        discontinuities: Pairs (i, d_i), d_i strictly decreasing.
        targets: F^{-i}(a) for the same indices.
        branches: Tiling of the plus domain (top branch first).
        i_bounds: (first index, last index); in the two-parameter family the
            last index is i_2, one past the last interior discontinuity.
        ell_cert: Certified lower bound of the return derivative.
        truncated_at: Last enumerated index when the discontinuities
            accumulate at a and enumeration stopped; None when complete.
        cap: Iteration budget of a single return.
    """

    regime: LadderRegime
    ladder: DomainLadder
    map: CentralMap
    g_offset: float
    discontinuities: tuple[tuple[int, float], ...]
    targets: tuple[float, ...]
    targets_lo: tuple[float, ...]
    branches: tuple[Branch, ...]
    i_bounds: tuple[int, int]
    ell_cert: float
    truncated_at: int | None
    cap: int = DEFAULT_RETURN_CAP
    _disc_sorted: tuple[float, ...] = field(default=(), repr=False)

    @property
    def d_plus(self) -> Interval:
        return self.ladder.d_plus

    @property
    def k(self) -> int:
        return self.ladder.k_t

    @property
    def finite(self) -> bool:
        return self.regime is LadderRegime.TWO_PARAM

    @property
    def covered(self) -> Interval:
        """Part of the plus domain tiled by enumerated branches."""
        return Interval(self.branches[-1].interval.lo, self.d_plus.hi)

    def to_dict(self) -> dict:
        return {
            "regime": self.regime.value,
            "t": self.ladder.t,
            "s": self.ladder.s,
            "g_offset": self.g_offset,
            "d_plus": self.d_plus.to_list(),
            "k_t": self.k,
            "discontinuities": [[i, d] for i, d in self.discontinuities],
            "i_bounds": list(self.i_bounds),
            "ell_cert": self.ell_cert,
            "truncated_at": self.truncated_at,
            "branches": [
                {"tile": b.tile, "index": b.index, "interval": b.interval.to_list(),
                 "onto": b.onto, "image": b.image.to_list(), "min_deriv": b.min_deriv}
                for b in self.branches
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def branch_table_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "left", "right", "image_left", "image_right", "min_deriv"])
        for b in self.branches:
            w.writerow([b.index, repr(b.interval.lo), repr(b.interval.hi),
                        repr(b.image.lo), repr(b.image.hi), repr(b.min_deriv)])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# pointwise maps
# ---------------------------------------------------------------------------

def _in_domain(model: ReturnMapModel, x: float) -> float:
    x = float(x)
    a, b = model.d_plus
    if not (a <= x <= b):
        raise OutOfDomain(f"x={x!r} outside the plus domain [{a}, {b}]")
    return x


def transition(model: ReturnMapModel, x: float) -> float:
    """The k_t-fold iterate carrying the plus domain onto the minus domain."""
    return model.map.iterate(_in_domain(model, x), model.k)


def transition_deriv(model: ReturnMapModel, x: float) -> float:
    return model.map.iterate_with_deriv(_in_domain(model, x), model.k)[1]


def g_map(model: ReturnMapModel, x: float) -> float:
    """Transition followed by the gluing shift ``t - 1``."""
    return transition(model, x) + model.g_offset


def _g_inverse(model: ReturnMapModel, y: float) -> float:
    return model.map.iterate(y - model.g_offset, -model.k)


def _find_discontinuity(model: ReturnMapModel, x: float) -> int | None:
    ds = model._disc_sorted
    j = bisect.bisect_left(ds, x)
    if j < len(ds) and ds[j] == x:
        return model.discontinuities[len(ds) - 1 - j][0]
    return None


def tile_of(model: ReturnMapModel, x: float) -> int:
    """Tile index of the branch containing ``x`` (-1 in the truncated zone)."""
    for br in model.branches:
        iv = br.interval
        if iv.lo <= x < iv.hi or (br.tile == 0 and x == iv.hi):
            return br.tile
    return -1


def return_step(model: ReturnMapModel, x: float) -> ReturnStep:
    """One application of the return map.

    Raises:
        AtDiscontinuity: ``x`` is an enumerated discontinuity.
        OutOfDomain: ``x`` is outside the domain of the return map.
        IterationBudgetExceeded: The orbit of G(x) did not re-enter in time.
    """
    x = _in_domain(model, x)
    i = _find_discontinuity(model, x)
    if i is not None:
        raise AtDiscontinuity(f"return map is bivalued at d_{i}={x!r}", index=i)
    a = model.d_plus.lo
    if x == a and not model.finite:
        raise OutOfDomain("the return map is undefined at the left endpoint")
    y = g_map(model, x)
    n, val, _ = kern.enter_from_left(*model.map.arrays, y, a, model.cap)
    if n < 0:
        raise IterationBudgetExceeded(f"return of {x!r} exceeded {model.cap}", cap=model.cap)
    return ReturnStep(float(val), int(n), tile_of(model, x))


def return_step_sided(model: ReturnMapModel, x: float, side: Side | str) -> ReturnStep:
    """Return map with the bivaluation at discontinuities resolved by ``side``."""
    i = _find_discontinuity(model, float(x))
    if i is None:
        return return_step(model, x)
    a, b = model.d_plus
    if Side(side) is Side.RIGHT:
        return ReturnStep(a, i, tile_of(model, x))
    return ReturnStep(b, i + 1, tile_of(model, x) + 1)


def return_deriv(model: ReturnMapModel, x: float) -> float:
    """Derivative of the return map at a continuity point."""
    x = _in_domain(model, x)
    y, dT = model.map.iterate_with_deriv(x, model.k)
    y += model.g_offset
    n, _, dF = kern.enter_from_left(*model.map.arrays, y, model.d_plus.lo, model.cap)
    if n < 0:
        raise IterationBudgetExceeded("return budget exhausted", cap=model.cap)
    return float(dT * dF)


def branch_apply(model: ReturnMapModel, x: float, index: int) -> float:
    """Continuous extension of the branch with iterate count ``index`` at ``x``."""
    y = g_map(model, x)
    return model.map.iterate(y, index)


def branch_inverse(model: ReturnMapModel, y: float, index: int) -> float:
    return _g_inverse(model, model.map.iterate(y, -index))


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def build_return_model(m: CentralMap, ladder: DomainLadder, *,
                       max_branches: int = DEFAULT_MAX_BRANCHES,
                       samples: int = SAMPLES_PER_BRANCH,
                       cap: int = DEFAULT_RETURN_CAP) -> ReturnMapModel:
    """Enumerate discontinuities and branches and certify the expansion.

    Raises:
        IterationBudgetExceeded: The first discontinuity is beyond ``cap``.
        BranchResolutionFailure: The enumerated discontinuities fail to
            decrease strictly.  Enumeration stops (and ``truncated_at`` is
            set) once consecutive targets come within ``RESOLUTION_ULPS``
            units in the last place of each other.
    """
    a, b = ladder.d_plus
    k = ladder.k_t
    off = ladder.t - 1.0
    arrays = m.arrays
    Ga = m.iterate(a, k) + off
    Gb = m.iterate(b, k) + off
    # first index whose backward image of a falls strictly below G(b); the
    # chain is followed in double-double so the targets stay exact enough
    # to replay the long orbit segments of the saddle-node regime
    i0, ph, pl = kern.backward_until_dd(*arrays, a, 0.0, Gb, cap)
    if i0 < 0:
        raise IterationBudgetExceeded("first discontinuity not found", cap=cap)
    finite = ladder.regime is LadderRegime.TWO_PARAM
    his, los = kern.backward_chain_dd(*arrays, ph, pl, Ga, max_branches + 1)
    resolution = RESOLUTION_ULPS * math.ulp(1.0)
    discs: list[tuple[int, float]] = []
    targets: list[float] = []
    targets_lo: list[float] = []
    truncated = None
    for j in range(len(his)):
        if len(discs) >= max_branches:
            truncated = i0 + j - 1
            break
        p = float(his[j])
        gap_prev = (his[j - 1] - p) + (los[j - 1] - los[j]) if j else Gb - p
        gap_next = p - Ga
        if gap_next < resolution or (j and gap_prev < resolution):
            truncated = i0 + j - 1
            break
        d = m.iterate(kern.dd_add(p, float(los[j]), -off, 0.0)[0], -k)
        if discs and not d < discs[-1][1]:
            raise BranchResolutionFailure(
                f"d_{i0 + j} = {d!r} does not lie below d_{discs[-1][0]} = {discs[-1][1]!r}")
        discs.append((i0 + j, d))
        targets.append(p)
        targets_lo.append(float(los[j]))
    if not finite and truncated is None:
        truncated = i0 + len(discs) - 1
    # branches
    branches: list[tuple[int, Interval, bool]] = []
    if discs:
        branches.append((discs[0][0], Interval(discs[0][1], b), False))
        for (i_prev, d_prev), (i, d) in zip(discs, discs[1:]):
            branches.append((i, Interval(d, d_prev), True))
        last_i = discs[-1][0]
        if finite:
            branches.append((last_i + 1, Interval(a, discs[-1][1]), False))
    else:
        branches.append((i0, Interval(a, b), False))
        last_i = i0
    if finite:
        i_bounds = (i0, last_i + 1 if discs else i0)
    else:
        i_bounds = (i0, last_i)
    model = ReturnMapModel(ladder.regime, ladder, m, off, tuple(discs), tuple(targets),
                           tuple(targets_lo), (), i_bounds, math.nan, truncated if not finite else None, cap,
                           tuple(d for _, d in reversed(discs)))
    mins = _branch_min_derivs(model, branches, samples)
    built = []
    for tile, ((i, iv, onto), dmin) in enumerate(zip(branches, mins)):
        if onto:
            img = Interval(a, b)
        elif not discs:
            img = Interval(branch_apply(model, a, i), branch_apply(model, b, i))
        elif tile == 0:
            img = Interval(a, branch_apply(model, b, i))
        else:
            img = Interval(branch_apply(model, a, i), b)
        built.append(Branch(tile, i, iv, onto, img, dmin))
    ell = min(mins) / K_SAFETY
    return ReturnMapModel(ladder.regime, ladder, m, off, tuple(discs), tuple(targets),
                          tuple(targets_lo), tuple(built), i_bounds, float(ell), model.truncated_at, cap,
                          model._disc_sorted)


def _direct_derivs(model: ReturnMapModel, xs: np.ndarray, index: int) -> np.ndarray:
    m = model.map
    vals, dT = kern.iterate_deriv_array(*m.arrays, xs, model.k)
    out = np.empty_like(xs)
    for c in range(xs.shape[0]):
        _, dF, _ = kern.iterate_with_deriv(*m.arrays, vals[c] + model.g_offset, index)
        out[c] = dT[c] * dF
    return out


def _branch_min_derivs(model: ReturnMapModel, branches, samples: int) -> list[float]:
    """Sampled minimum of the return derivative on each branch (one-sided at the ends)."""
    m = model.map
    a, b = model.d_plus
    out = [math.nan] * len(branches)
    onto_rows = [(j, i) for j, (i, _, onto) in enumerate(branches) if onto]
    if onto_rows:
        imin = onto_rows[0][1]
        imax = onto_rows[-1][1]
        z = np.linspace(a, b, samples)
        pts, dpts = kern.backward_table(*m.arrays, z, imin, imax)
        for j, i in onto_rows:
            ys = pts[i - imin] - model.g_offset
            xs = kern.iterate_array(*m.arrays, np.ascontiguousarray(ys), -model.k)
            _, dT = kern.iterate_deriv_array(*m.arrays, xs, model.k)
            out[j] = float(np.min(dT * dpts[i - imin]))
    for j, (i, iv, onto) in enumerate(branches):
        if onto:
            continue
        xs = np.linspace(iv.lo, iv.hi, samples)
        out[j] = float(np.min(_direct_derivs(model, xs, i)))
    return out


# ---------------------------------------------------------------------------
# certificates
# ---------------------------------------------------------------------------

def default_floor(model: ReturnMapModel) -> float:
    from .hypotheses import t3_ell  # local import: hypotheses depends on this module

    if model.regime is LadderRegime.HYPERBOLIC:
        return t3_ell(model.map.spec.lam, model.map.spec.beta)
    if model.regime is LadderRegime.TWO_PARAM:
        return TWO_PARAM_RETURN_FLOOR
    return 1.0


def min_expansion(model: ReturnMapModel, floor: float | None = None,
                  policy: Policy = DEFAULT_POLICY) -> float:
    """Certified minimum return derivative; raises when it is at or below ``floor``.

    Raises:
        ExpansionFloorViolated: The certified minimum does not exceed the floor.
    """
    floor = default_floor(model) if floor is None else floor
    ell = model.ell_cert
    if not ell > floor or less_equal(ell, floor, policy):
        br = min(model.branches, key=lambda q: q.min_deriv)
        raise ExpansionFloorViolated(
            f"return derivative {ell} does not exceed {floor}", br.interval.mid, ell)
    return ell


def transition_derivs(model: ReturnMapModel, n: int = 1000) -> np.ndarray:
    """Transition derivative on a uniform grid of the plus domain."""
    xs = np.linspace(*model.d_plus, n)
    _, d = kern.iterate_deriv_array(*model.map.arrays, xs, model.k)
    return d


def transition_min_derivative(model: ReturnMapModel, n: int = 1000) -> float:
    return float(transition_derivs(model, n).min())


def two_param_transition_bound(model: ReturnMapModel) -> float:
    """Analytic lower bound e^{-2K} * 3 lambda (1-t) / (t^2 + |s|) for the transition slope."""
    t, s = model.ladder.t, model.ladder.s
    lam = model.map.spec.lam
    return math.exp(-2 * model.map.distortion_K) * 3 * lam * (1 - t) / (t * t + abs(s))


def onto_residuals(model: ReturnMapModel, limit: int | None = None) -> list[float]:
    """Onto-ness defect of each interior branch as a fraction of |D+|.

    A branch with index i is the preimage under G of [p_i, p_{i-1}] where
    p_i = F^{-i}(a); it is onto when F^i carries that interval to [a, b].
    The replay runs in double-double from the stored targets.
    """
    a, b = model.d_plus
    arrays = model.map.arrays
    L = model.d_plus.length
    out = []
    n = len(model.targets)
    for j in range(1, n):
        if limit is not None and j > limit:
            break
        i = model.discontinuities[j][0]
        lo_h, lo_l = kern.forward_dd(*arrays, model.targets[j], model.targets_lo[j], i)
        hi_h, hi_l = kern.forward_dd(*arrays, model.targets[j - 1], model.targets_lo[j - 1], i)
        err_lo = abs(kern.dd_add(lo_h, lo_l, -a, 0.0)[0])
        err_hi = abs(kern.dd_add(hi_h, hi_l, -b, 0.0)[0])
        out.append(max(err_lo, err_hi) / L)
    return out


def discontinuity_residuals(model: ReturnMapModel) -> list[float]:
    """|G(d_i) - F^{-i}(a)| for every enumerated discontinuity."""
    return [abs(g_map(model, d) - p) for (_, d), p in zip(model.discontinuities, model.targets)]


# ---------------------------------------------------------------------------
# covering
# ---------------------------------------------------------------------------

def _interior_discontinuities(model: ReturnMapModel, lo: float, hi: float) -> list[int]:
    """Indices i of the discontinuities d_i in the open interval (lo, hi)."""
    ds = model._disc_sorted
    j0 = bisect.bisect_right(ds, lo)
    j1 = bisect.bisect_left(ds, hi)
    n = len(ds)
    return [model.discontinuities[n - 1 - j][0] for j in range(j0, j1)]


def _branch_for_open(model: ReturnMapModel, lo: float, hi: float) -> Branch:
    for br in model.branches:
        if br.interval.lo <= lo and hi <= br.interval.hi:
            return br
    raise OutOfDomain(f"({lo}, {hi}) is not inside an enumerated branch")


def covering_bound(model: ReturnMapModel, length: float, growth: float) -> int:
    return int(math.ceil(math.log(model.d_plus.length / length) / math.log(growth))) + 1


@dataclass(frozen=True)
class DiscontinuityHit:
    """Witness that an iterate of an interval reaches a discontinuity.

    Attributes:
        k: Number of returns before the image contains a discontinuity.
        x: Point of the starting interval whose k-th return is that discontinuity.
        index: Index i of the discontinuity d_i that is hit.
        residual: |g_map| at the right-side value of the return at d_i.
        bound: The a-priori bound on k.
    """

    k: int
    x: float
    index: int
    residual: float
    bound: int


def hit_discontinuity(model: ReturnMapModel, J: tuple[float, float],
                      cap: int = 10_000) -> DiscontinuityHit:
    """Least k with the k-th return image of the open interval J containing some d_i.

    Raises:
        IterationBudgetExceeded: No discontinuity within ``cap`` returns, or the
            image entered the part of the domain left unenumerated.
    """
    lo, hi = float(J[0]), float(J[1])
    if not (model.d_plus.lo <= lo < hi <= model.d_plus.hi):
        raise OutOfDomain("J must be a subinterval of the plus domain")
    bound = covering_bound(model, hi - lo, model.ell_cert) if model.ell_cert > 1 else cap
    path: list[int] = []
    for k in range(cap + 1):
        inside = _interior_discontinuities(model, lo, hi)
        if inside:
            idx = inside[0]
            d = dict(model.discontinuities)[idx]
            x = d
            for i in reversed(path):
                x = branch_inverse(model, x, i)
            resid = abs(g_map(model, model.d_plus.lo))
            return DiscontinuityHit(k, float(x), idx, resid, bound)
        if lo < model.covered.lo:
            raise IterationBudgetExceeded(
                "image reached the unenumerated accumulation zone", cap=cap)
        br = _branch_for_open(model, lo, hi)
        path.append(br.index)
        lo, hi = branch_apply(model, lo, br.index), branch_apply(model, hi, br.index)
    raise IterationBudgetExceeded("no discontinuity reached", cap=cap)


def _merge(pieces: list[tuple[float, float]]) -> list[tuple[float, float]]:
    pieces = sorted(pieces)
    out: list[list[float]] = []
    for lo, hi in pieces:
        if out and lo <= out[-1][1]:
            out[-1][1] = max(out[-1][1], hi)
        else:
            out.append([lo, hi])
    return [(lo, hi) for lo, hi in out]


def _image_pieces(model: ReturnMapModel, lo: float, hi: float) -> list[tuple[float, float]]:
    """Image of [lo, hi] split at interior discontinuities (closed pieces)."""
    cuts = [dict(model.discontinuities)[i] for i in _interior_discontinuities(model, lo, hi)]
    edges = [lo] + sorted(cuts) + [hi]
    out = []
    for u, v in zip(edges, edges[1:]):
        if v <= u:
            continue
        br = _branch_for_open(model, u, v)
        out.append((branch_apply(model, u, br.index), branch_apply(model, v, br.index)))
    return out


def full_cover_time(model: ReturnMapModel, J: tuple[float, float],
                    cap: int | None = None) -> int:
    """Least m with the m-th image of J covering the plus domain.

    Raises:
        IterationBudgetExceeded: Not covered within ``cap`` steps (defaults to
            the growth bound of the covering argument).
    """
    lo, hi = float(J[0]), float(J[1])
    a, b = model.d_plus
    bound = covering_bound(model, hi - lo, 1.5) + 1
    cap = bound if cap is None else cap
    pieces = [(lo, hi)]
    slack = 1e-9 * (b - a)
    for m in range(cap + 1):
        merged = _merge(pieces)
        if any(u <= a + slack and v >= b - slack for u, v in merged):
            return m
        if m == cap:
            break
        nxt: list[tuple[float, float]] = []
        for u, v in merged:
            u, v = max(u, a), min(v, b)
            if v > u:
                nxt.extend(_image_pieces(model, u, v))
        pieces = nxt
    raise IterationBudgetExceeded(f"images of J do not cover D+ within {cap} steps", cap=cap)
