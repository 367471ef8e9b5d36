"""Skew-product model on a cube, strip algebra and box coverings.

The model acts on ``C = [-1, 1] x Y x [-1, 1]`` (``Y`` is the central
domain) by the product ``(x, y, z) -> (lambda_s x, F(y), lambda_u z)``,
except on small glue windows around ``(0, c, -1/2)`` where it is the
translation ``(x - 1/2, y - 1 + t, z + 1/2)``.  The glue counts as one
iterate.

Invariant sets are covered with boxes of a tensor grid.  Images of boxes
are exact (every map is a product of monotone maps), so the box graph is
an outer approximation of the dynamics.  Pruning that graph gives the
retained set and its strongly connected components give the two classes
that contain the saddles P and Q.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from numba import njit
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from . import _kernels as kern
from .central_maps import CentralMap, Regime
from .errors import (
    AccumulationNeeded,
    CrossesDiscontinuity,
    InvalidSpec,
    IterationBudgetExceeded,
    NotPerfect,
    OutOfCube,
    OutOfDomain,
    OutsideGlueWindow,
    PreconditionFailed,
    ResourceBudgetExceeded,
)
from .interval import Interval
from .return_maps import (
    ReturnMapModel,
    _branch_for_open,
    _interior_discontinuities,
    branch_apply,
    branch_inverse,
    covering_bound,
    g_map,
    hit_discontinuity,
)

LAMBDA_S = 0.25
LAMBDA_U = 4.0
GLUE_RADIUS = 0.05
GLUE_SHIFT_X = -0.5
GLUE_SHIFT_Z = 0.5
REGION_RADIUS = 0.1
ENDPOINT_TOL = 1e-9   # relative to the domain length
INVERSE_TOL = 1e-12
NECK_SPAN = 0.125
MIN_NECK_WIDTH = 1e-3
MAX_BOXES = 1 << 25
MAX_EDGES = 50_000_000
DEFAULT_RESOLUTION = 64
DEFAULT_HORIZON = 1000
FACES = ("x", "y", "z")


class Box(NamedTuple):
    """Closed axis-parallel box."""

    x: Interval
    y: Interval
    z: Interval

    def contains(self, p: Sequence[float]) -> bool:
        return all(iv.lo <= float(c) <= iv.hi for iv, c in zip(self, p))

    def to_list(self) -> list[list[float]]:
        return [iv.to_list() for iv in self]


def _cube_box(center: tuple[float, float, float], r: float) -> Box:
    return Box(*(Interval(c - r, c + r) for c in center))


@dataclass(frozen=True)
class SkewFamily:
    """One member of the model family.

    Attributes:
        central: Central map acting on the y-coordinate.
        lambda_s: Contraction along x.
        lambda_u: Expansion along z.
        t: Unfolding parameter of the glue.
        s: Parameter of the central map.
        k0: Iterates spent by one glue; the glue is applied as one step.
        glue_windows: Boxes on which the glue replaces the product map.
        cube: The cube ``C``.
        saddles: Named fixed points.
    """

    central: CentralMap
    lambda_s: float
    lambda_u: float
    t: float
    s: float
    k0: int
    glue_windows: tuple[Box, ...]
    cube: Box
    saddles: dict = field(default_factory=dict)

    @property
    def glue_window(self) -> Box:
        """The window around (0, 1, -1/2)."""
        return self.glue_windows[-1]

    @property
    def shift(self) -> tuple[float, float, float]:
        return (GLUE_SHIFT_X, self.t - 1.0, GLUE_SHIFT_Z)

    @property
    def separatrix(self) -> float | None:
        """Central value dividing the two classes; None when they merge."""
        if self.central.spec.regime is Regime.TWO_PARAM:
            if self.s > 0:
                return math.sqrt(self.s)
            return 0.0 if self.s == 0 else None
        return 0.0

    @property
    def p(self) -> tuple[float, float, float]:
        return self.saddles["P"]

    @property
    def q(self) -> tuple[float, float, float]:
        return self.saddles["Q"]


def make_family(central: CentralMap, t: float, lambda_s: float = LAMBDA_S,
                lambda_u: float = LAMBDA_U, glue_radius: float = GLUE_RADIUS) -> SkewFamily:
    """Assemble the family member with central map ``central`` at glue offset ``t``.

    The two-parameter central map gets glue windows near the central values
    -1, 0 and 1; the others only near 1.

    Raises:
        InvalidSpec: The central derivative bounds are not dominated by the
            contraction and expansion rates.
    """
    dm, dM = central.certified_deriv_bounds
    if not (0 < lambda_s < dm and dM < lambda_u):
        raise InvalidSpec(f"need lambda_s < {dm} and {dM} < lambda_u")
    lo, hi = central.domain
    cube = Box(Interval(-1.0, 1.0), Interval(lo, hi), Interval(-1.0, 1.0))
    reg = central.spec.regime
    s = float(central.spec.s)
    centers = (-1.0, 0.0, 1.0) if reg is Regime.TWO_PARAM else (1.0,)
    windows = tuple(_cube_box((0.0, c, -0.5), glue_radius) for c in centers)
    saddles = {"P": (0.0, 1.0, 0.0)}
    if reg is Regime.TWO_PARAM:
        saddles["Q"] = (0.0, -1.0, 0.0)
        saddles["S"] = (0.0, 0.0, 0.0)
        if s > 0:
            r = math.sqrt(s)
            saddles["S+"] = (0.0, r, 0.0)
            saddles["S-"] = (0.0, -r, 0.0)
    else:
        saddles["Q"] = (0.0, 0.0, 0.0)
        saddles["S"] = (0.0, 0.0, 0.0)
    return SkewFamily(central, float(lambda_s), float(lambda_u), float(t), s, 1,
                      windows, cube, saddles)


# ---------------------------------------------------------------------------
# pointwise dynamics
# ---------------------------------------------------------------------------

def _point(p) -> tuple[float, float, float]:
    x, y, z = (float(c) for c in p)
    return x, y, z


def in_cube(fam: SkewFamily, p) -> bool:
    return fam.cube.contains(p)


def in_glue_window(fam: SkewFamily, p) -> bool:
    return any(w.contains(p) for w in fam.glue_windows)


def step(fam: SkewFamily, p) -> tuple[float, float, float]:
    """Product map ``(lambda_s x, F(y), lambda_u z)``.

    Raises:
        OutOfCube: ``p`` is not in the cube.
    """
    x, y, z = _point(p)
    if not in_cube(fam, (x, y, z)):
        raise OutOfCube(f"{(x, y, z)} is outside the cube")
    return fam.lambda_s * x, fam.central.eval(y), fam.lambda_u * z


def step_inv(fam: SkewFamily, p) -> tuple[float, float, float]:
    """Inverse of :func:`step`.

    Raises:
        OutOfCube: The preimage is not in the cube.
    """
    x, y, z = _point(p)
    lo, hi = fam.central.range
    if not (lo <= y <= hi):
        raise OutOfCube(f"y={y} has no preimage in the cube")
    q = (x / fam.lambda_s, fam.central.inverse(y), z / fam.lambda_u)
    if not in_cube(fam, q):
        raise OutOfCube(f"preimage {q} is outside the cube")
    return q


def glue(fam: SkewFamily, p) -> tuple[float, float, float]:
    """Glue translation on the windows.

    Raises:
        OutsideGlueWindow: ``p`` is in no window.
    """
    x, y, z = _point(p)
    if not in_glue_window(fam, (x, y, z)):
        raise OutsideGlueWindow(f"{(x, y, z)} is outside the glue windows")
    # (y - 1) + t keeps glue(0, 1, -1/2) = (-1/2, t, 0) exact
    return x + GLUE_SHIFT_X, (y - 1.0) + fam.t, z + GLUE_SHIFT_Z


def unglue(fam: SkewFamily, p) -> tuple[float, float, float]:
    """Inverse glue.

    Raises:
        OutsideGlueWindow: The preimage is in no window.
    """
    x, y, z = _point(p)
    q = (x - GLUE_SHIFT_X, (y - fam.t) + 1.0, z - GLUE_SHIFT_Z)
    if not in_glue_window(fam, q):
        raise OutsideGlueWindow(f"{(x, y, z)} is not a glue image")
    return q


def apply(fam: SkewFamily, p) -> tuple[tuple[float, float, float], str]:
    """One iterate of the model: the glue on the windows, the product map elsewhere."""
    if in_glue_window(fam, p):
        return glue(fam, p), "glue"
    return step(fam, p), "step"


def apply_inv(fam: SkewFamily, p) -> tuple[tuple[float, float, float], str]:
    try:
        return unglue(fam, p), "glue"
    except OutsideGlueWindow:
        return step_inv(fam, p), "step"


def _exit_face(fam: SkewFamily, p) -> str:
    for name, iv, c in zip(FACES, fam.cube, p):
        if not c >= iv.lo:
            return name + "-"
        if not c <= iv.hi:
            return name + "+"
    return name + "+"


@dataclass(frozen=True)
class OrbitRecord:
    """Forward or backward orbit with exit bookkeeping.

    Attributes:
        points: Visited points, row 0 being the start.
        events: ``start``, ``step``, ``glue`` or ``exit`` for each row.
        exit_step: Index of the first point outside the cube, if any.
        exit_face: Face crossed at the exit, e.g. ``"z+"``.
        regions: Saddle neighbourhood visited at each row ("" for none).
        backward: Whether the orbit runs backward.
    """

    points: np.ndarray
    events: tuple[str, ...]
    exit_step: int | None
    exit_face: str | None
    regions: tuple[str, ...] | None = None
    backward: bool = False

    @property
    def exited(self) -> bool:
        return self.exit_step is not None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("n", "x", "y", "z", "event"))
        sign = -1 if self.backward else 1
        for n, (p, ev) in enumerate(zip(self.points, self.events)):
            w.writerow([sign * n, repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), ev])
        return buf.getvalue()


def region_of(fam: SkewFamily, p, radius: float = REGION_RADIUS) -> str:
    """Name of the saddle within sup-distance ``radius`` of ``p`` ("" if none)."""
    for name in ("P", "Q", "S"):
        c = fam.saddles[name]
        if max(abs(a - b) for a, b in zip(p, c)) <= radius:
            return name
    return ""


def orbit(fam: SkewFamily, p, n_max: int, record_region: bool = False,
          backward: bool = False) -> OrbitRecord:
    """Iterate ``p`` up to ``n_max`` times, stopping at the first exit from the cube."""
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    cur = _point(p)
    pts = [cur]
    events = ["start"]
    exit_step = exit_face = None
    if not in_cube(fam, cur):
        exit_step, exit_face = 0, _exit_face(fam, cur)
    else:
        for n in range(1, n_max + 1):
            try:
                nxt, ev = apply_inv(fam, cur) if backward else apply(fam, cur)
            except OutOfCube:
                nxt, ev = _leave(fam, cur, backward), "exit"
            if ev != "exit" and not in_cube(fam, nxt):
                ev = "exit"
            pts.append(nxt)
            events.append(ev)
            if ev == "exit":
                exit_step, exit_face = n, _exit_face(fam, nxt)
                break
            cur = nxt
    regions = tuple(region_of(fam, q) for q in pts) if record_region else None
    return OrbitRecord(np.array(pts, dtype=np.float64), tuple(events), exit_step,
                       exit_face, regions, backward)


def _leave(fam: SkewFamily, p, backward: bool) -> tuple[float, float, float]:
    """Image of ``p`` across the boundary; the central part may be undefined."""
    x, y, z = p
    if backward:
        lo, hi = fam.central.range
        yy = fam.central.inverse(y) if lo <= y <= hi else (-math.inf if y < lo else math.inf)
        return x / fam.lambda_s, yy, z / fam.lambda_u
    yy = float(kern.f_eval(*fam.central.arrays, y))
    return fam.lambda_s * x, yy, fam.lambda_u * z


# ---------------------------------------------------------------------------
# strips and segments
# ---------------------------------------------------------------------------

class StripKind(str, enum.Enum):
    G_KIND = "G_KIND"
    R_KIND = "R_KIND"


@dataclass(frozen=True)
class StripSpec:
    """Vertical strip ``{x1} x [l1, l2] x [r1, r2]``.

    A zero-width y-interval describes a segment.
    """

    x1: float
    y_interval: Interval
    z_interval: Interval
    complete: bool
    well_located: bool
    perfect: bool

    @classmethod
    def make(cls, x1: float, y_interval, z_interval, d_plus: Interval) -> "StripSpec":
        l1, l2 = (float(v) for v in y_interval)
        r1, r2 = (float(v) for v in z_interval)
        if not (l1 <= l2 and r1 < 0 < r2):
            raise ValueError(f"malformed strip {(l1, l2)} x {(r1, r2)}")
        complete = r1 <= -1.0 and r2 >= 1.0
        a, b = d_plus
        well = a < l1 and l2 < b
        return cls(float(x1), Interval(l1, l2), Interval(r1, r2), complete, well,
                   complete and well)

    def to_dict(self) -> dict:
        return {"x1": self.x1, "y_interval": self.y_interval.to_list(),
                "z_interval": self.z_interval.to_list(), "complete": self.complete,
                "well_located": self.well_located, "perfect": self.perfect}


FULL_Z = Interval(-1.0, 1.0)


def strip_successor(fam: SkewFamily, model: ReturnMapModel, strip: StripSpec,
                    kind: StripKind | str) -> StripSpec:
    """Strip carried by the glued transition (G_KIND) or the return map (R_KIND).

    Raises:
        NotPerfect: The input strip is not perfect.
        CrossesDiscontinuity: (R_KIND) the y-interval contains a discontinuity
            or reaches the unenumerated part of the plus domain; split it.
    """
    if not strip.perfect:
        raise NotPerfect("strip successors need a perfect strip")
    kind = StripKind(kind)
    l1, l2 = strip.y_interval
    x = fam.lambda_s ** model.k * strip.x1 + GLUE_SHIFT_X
    if kind is StripKind.G_KIND:
        y = (g_map(model, l1), g_map(model, l2))
        return StripSpec.make(x, y, FULL_Z, model.d_plus)
    inside = _interior_discontinuities(model, l1, l2)
    if inside:
        raise CrossesDiscontinuity(f"y-interval contains d_{inside[0]}")
    try:
        br = _branch_for_open(model, l1, l2)
    except OutOfDomain as exc:
        raise CrossesDiscontinuity(str(exc)) from exc
    y = (branch_apply(model, l1, br.index), branch_apply(model, l2, br.index))
    return StripSpec.make(fam.lambda_s ** br.index * x, y, FULL_Z, model.d_plus)


class StableWitness(NamedTuple):
    """Point of a strip basis whose orbit meets the stable set of Q.

    Attributes:
        point: ``(x1, y, 0)`` on the strip.
        k: Number of returns; the k-th return lies on the stable segment.
        residual: Distance of that return to the segment, evaluated at the
            exact endpoint (or backward iterate of 0) it reaches.
    """

    point: tuple[float, float, float]
    k: int
    residual: float


def stable_Q_witness(fam: SkewFamily, model: ReturnMapModel, strip: StripSpec,
                     cap: int = 10_000) -> StableWitness:
    """Witness that the forward orbit of a perfect strip meets the stable set of Q.

    In the one-parameter regimes the orbit of the y-interval is followed
    until it contains a discontinuity ``d_i``; the next return is the left
    end ``a`` and ``g_map(a) = 0``.  In the two-parameter regime the images
    are followed until they cover the plus domain and the witness is the
    backward orbit of 0 inside it.

    Raises:
        NotPerfect: The strip is not perfect.
        IterationBudgetExceeded: No witness within ``cap`` returns.
    """
    if not strip.perfect:
        raise NotPerfect("stable_Q_witness needs a perfect strip")
    J = (strip.y_interval.lo, strip.y_interval.hi)
    if model.finite:
        return _two_param_witness(fam, model, strip, cap)
    hit = hit_discontinuity(model, J, cap=cap)
    a = model.d_plus.lo
    return StableWitness((strip.x1, hit.x, 0.0), hit.k + 1, abs(g_map(model, a)))


def _two_param_witness(fam: SkewFamily, model: ReturnMapModel, strip: StripSpec,
                       cap: int) -> StableWitness:
    a, b = model.d_plus
    m = fam.central
    j = 0
    y = 0.0
    while not (a <= y <= b):
        j += 1
        if j > cap:
            raise IterationBudgetExceeded("backward orbit of 0 missed the plus domain", cap=cap)
        y = m.inverse(y)
    # follow the images with their branch words until one contains y
    pieces = [(strip.y_interval.lo, strip.y_interval.hi, ())]
    slack = 1e-9 * (b - a)
    for k in range(cap + 1):
        for u, v, word in pieces:
            if u - slack <= y <= v + slack:
                x = min(max(y, u), v)
                for i in reversed(word):
                    x = branch_inverse(model, x, i)
                resid = abs(m.iterate(y, j))
                return StableWitness((strip.x1, x, 0.0), k, resid)
        nxt = []
        for u, v, word in pieces:
            u, v = max(u, a), min(v, b)
            if v <= u:
                continue
            cuts = [dict(model.discontinuities)[i] for i in _interior_discontinuities(model, u, v)]
            edges = [u] + sorted(cuts) + [v]
            for p0, p1 in zip(edges, edges[1:]):
                if p1 > p0:
                    br = _branch_for_open(model, p0, p1)
                    nxt.append((branch_apply(model, p0, br.index),
                                branch_apply(model, p1, br.index), word + (br.index,)))
        pieces = nxt
    raise IterationBudgetExceeded("images never reached the witness value", cap=cap)


def perfect_segment_witness(fam: SkewFamily, model: ReturnMapModel,
                            cap: int = 100_000_000) -> StripSpec:
    """Vertical segment of the unstable set of P with central value inside the plus domain.

    Chases ``(-1/2, t, 0)``: forward to the minus domain, through the glue
    and forward again until the central value first enters the plus domain.

    Raises:
        AccumulationNeeded: The chase lands on an endpoint of the minus or
            plus domain, where a finite chase does not produce the segment.
        IterationBudgetExceeded: The chase does not reach the domains.
    """
    m = fam.central
    ld = model.ladder
    t = fam.t
    dm = ld.d_minus
    n = m.first_entry_time(t, (dm.lo, dm.hi), cap=cap)
    yn = m.iterate(t, n)
    u = (yn - dm.lo) / dm.length
    if u < ENDPOINT_TOL or u > 1 - ENDPOINT_TOL:
        raise AccumulationNeeded(f"chase reached the minus domain at its endpoint (u={u:.3e})")
    y2 = yn + model.g_offset
    a, b = model.d_plus
    j, ystar, _ = kern.enter_from_left(*m.arrays, y2, a, cap)
    if j < 0:
        raise IterationBudgetExceeded("chase never entered the plus domain", cap=cap)
    v = (ystar - a) / (b - a)
    if v < ENDPOINT_TOL or v > 1 - ENDPOINT_TOL:
        raise AccumulationNeeded(f"chase reached the plus domain at its endpoint (v={v:.3e})")
    x = fam.lambda_s ** j * (-0.5 * fam.lambda_s ** n + GLUE_SHIFT_X)
    return StripSpec.make(x, (float(ystar), float(ystar)), FULL_Z, model.d_plus)


@dataclass(frozen=True)
class RectangleReturn:
    """Outcome of the rectangle return check.

    Attributes:
        i: Least iterate with ``F^i(1/n)`` in ``(1 - t + 1/n, 1)``.
        gamma: Rectangle ``{a} x [0, 1/n] x [-1/n, 1/n]`` inside the image at j = 0.
        images: For j = 0, 1, 2 the computed image rectangle
            ``(x, y-interval, z-interval)`` after i iterates, the glue and j more.
        checks: Containment verdict for each j.
    """

    i: int
    gamma: Box
    images: tuple[Box, ...]
    checks: tuple[bool, ...]

    @property
    def passed(self) -> bool:
        return all(self.checks)


def rectangle_return(fam: SkewFamily, x: float, n: int, js: Sequence[int] = (0, 1, 2),
                     cap: int = 10_000_000) -> RectangleReturn:
    """Image of the thin rectangle ``{x} x [0, 1/n] x [-1/n, 1/n]`` after the first return.

    Raises:
        PreconditionFailed: ``1/n >= t`` or the returning part misses the glue window.
        IterationBudgetExceeded: No return within ``cap`` iterates.
    """
    t = fam.t
    h = 1.0 / n
    if not h < t:
        raise PreconditionFailed(f"need 1/n < t, got 1/n={h}, t={t}")
    w = fam.glue_window
    if 1 - t < w.y.lo or abs(x) > 1:
        raise PreconditionFailed("the returning strip must lie inside the glue window")
    m = fam.central
    lo = 1.0 - t + h
    i = m.first_entry_time(h, (lo, 1.0), cap=cap)
    e = m.iterate(h, i)
    if not (lo < e < 1.0):
        raise PreconditionFailed(f"F^{i}(1/n) = {e} lands on the boundary of the target")
    xi = fam.lambda_s ** i * x
    if not w.x.lo <= xi <= w.x.hi:
        raise PreconditionFailed("basis point misses the glue window")
    y_lo0 = m.iterate(0.0, i)
    # part of the image inside the window: central values from 1 - t up to e
    gx = xi + GLUE_SHIFT_X
    gy = (max(y_lo0, 1.0 - t) + fam.t - 1.0, e + fam.t - 1.0)
    gz = (w.z.lo + GLUE_SHIFT_Z, w.z.hi + GLUE_SHIFT_Z)
    images = []
    checks = []
    for j in js:
        bx = fam.lambda_s ** j * gx
        by = Interval(m.iterate(gy[0], j), m.iterate(gy[1], j))
        bz = Interval(max(-1.0, fam.lambda_u ** j * gz[0]), min(1.0, fam.lambda_u ** j * gz[1]))
        images.append(Box(Interval(bx, bx), by, bz))
        checks.append(by.lo <= 0.0 and by.hi >= h and bz.lo <= -h and bz.hi >= h)
    gamma = Box(Interval(images[0].x.lo, images[0].x.lo), Interval(0.0, h), Interval(-h, h))
    return RectangleReturn(int(i), gamma, tuple(images), tuple(checks))


# ---------------------------------------------------------------------------
# box coverings
# ---------------------------------------------------------------------------

class Label(str, enum.Enum):
    LAMBDA_PLUS = "LAMBDA_PLUS"
    LAMBDA_MINUS = "LAMBDA_MINUS"
    WANDERING = "WANDERING"
    UNRESOLVED = "UNRESOLVED"


class Verdict(str, enum.Enum):
    DISJOINT = "DISJOINT"
    TOUCH_AT_S = "TOUCH_AT_S"
    MERGED = "MERGED"
    ADJACENT = "ADJACENT"  # the labels touch away from S


VERDICT_CODE = {Verdict.DISJOINT: 1, Verdict.TOUCH_AT_S: 0, Verdict.MERGED: -1,
                Verdict.ADJACENT: 2}
_LABELS = tuple(Label)
_CODE = {lab: i for i, lab in enumerate(_LABELS)}


@dataclass(eq=False)
class BoxSet:
    """Retained boxes of a tensor grid with per-box labels.

    Attributes:
        resolution: Cell counts per axis.
        edges: Cell boundaries per axis.
        boxes: Integer triples (ix, iy, iz), sorted lexicographically.
        labels: One label per box; UNRESOLVED until classified.
        t, s: Family parameters.
        horizon: Pruning and sampling budget.
        rounds: Pruning rounds performed.
        converged: Whether pruning reached a fixed point within the horizon.
        pending: Mask of boxes the next pruning round would drop.
        verdict: Relation between the two labelled regions once classified.
        contacts: Face contacts between the labelled regions.
    """

    resolution: tuple[int, int, int]
    edges: tuple[np.ndarray, np.ndarray, np.ndarray]
    boxes: np.ndarray
    labels: np.ndarray
    t: float
    s: float
    horizon: int
    rounds: int
    converged: bool
    pending: np.ndarray
    verdict: Verdict | None = None
    contacts: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.boxes.shape[0])

    def label_list(self) -> list[Label]:
        return [_LABELS[c] for c in self.labels]

    def counts(self) -> dict[str, int]:
        return {lab.value: int(np.sum(self.labels == _CODE[lab])) for lab in _LABELS}

    def mask(self, label: Label) -> np.ndarray:
        return self.labels == _CODE[Label(label)]

    def bounds(self, idx: int) -> Box:
        ix, iy, iz = self.boxes[idx]
        ex, ey, ez = self.edges
        return Box(Interval(float(ex[ix]), float(ex[ix + 1])),
                   Interval(float(ey[iy]), float(ey[iy + 1])),
                   Interval(float(ez[iz]), float(ez[iz + 1])))

    def centers(self) -> np.ndarray:
        ex, ey, ez = self.edges
        b = self.boxes
        return np.stack([(ex[b[:, 0]] + ex[b[:, 0] + 1]) / 2,
                         (ey[b[:, 1]] + ey[b[:, 1] + 1]) / 2,
                         (ez[b[:, 2]] + ez[b[:, 2] + 1]) / 2], axis=1)

    def containing(self, p) -> np.ndarray:
        """Indices of boxes whose closure contains ``p``."""
        sel = np.ones(len(self), dtype=bool)
        for ax in range(3):
            e = self.edges[ax]
            i = self.boxes[:, ax]
            sel &= (e[i] <= p[ax]) & (p[ax] <= e[i + 1])
        return np.nonzero(sel)[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("ix", "iy", "iz", "label"))
        for (ix, iy, iz), c in zip(self.boxes.tolist(), self.labels.tolist()):
            w.writerow((ix, iy, iz, _LABELS[c].value))
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "resolution": list(self.resolution),
            "t": self.t,
            "s": self.s,
            "horizon": self.horizon,
            "rounds": self.rounds,
            "converged": self.converged,
            "retained": len(self),
            "counts": self.counts(),
            "verdict": None if self.verdict is None else self.verdict.value,
            "adjacency": self.contacts,
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True)


def _neck_width(fam: SkewFamily) -> float:
    return max(math.sqrt(abs(fam.s)), MIN_NECK_WIDTH) / 2


def grid_edges(fam: SkewFamily, resolution, neck_width: float | None = None,
               neck_span: float = NECK_SPAN) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Tensor grid: uniform per axis, with dyadic refinement of ``|y| <= neck_span``.

    The refinement width is the largest ``neck_span / 2^k`` not above
    ``neck_width``; zero disables it.
    """
    rx, ry, rz = (resolution,) * 3 if np.isscalar(resolution) else tuple(resolution)
    if min(rx, ry, rz) < 8:
        raise ValueError("resolution must be at least 8 per axis")
    cx, cy, cz = fam.cube
    ex = np.linspace(cx.lo, cx.hi, int(rx) + 1)
    ey = np.linspace(cy.lo, cy.hi, int(ry) + 1)
    ez = np.linspace(cz.lo, cz.hi, int(rz) + 1)
    w = _neck_width(fam) if neck_width is None else float(neck_width)
    if w > 0:
        k = max(0, math.ceil(math.log2(neck_span / w)))
        fine = np.linspace(-neck_span, neck_span, 2 ** (k + 1) + 1)
        ey = np.unique(np.concatenate([ey, fine]))
    return ex, ey, ez


def _ranges(edges: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cells whose open interior meets ``[lo, hi]``; empty ranges have first > last."""
    n = edges.shape[0] - 1
    first = np.searchsorted(edges, lo, side="right") - 1
    last = np.searchsorted(edges, hi, side="left") - 1
    first = np.maximum(first, 0)
    last = np.minimum(last, n - 1)
    bad = ~(hi > lo) | np.isnan(lo) | np.isnan(hi)
    first = np.where(bad, 1, first)
    last = np.where(bad, 0, last)
    return first.astype(np.int64), last.astype(np.int64)


class _AxisMaps(NamedTuple):
    # shape (M, 3, 2, n_axis_max): map index, axis, (first, last)
    fwd: np.ndarray
    bwd: np.ndarray


def _axis_maps(fam: SkewFamily, edges) -> _AxisMaps:
    m = fam.central
    ex, ey, ez = edges
    n = max(len(e) - 1 for e in edges)
    nmaps = 1 + len(fam.glue_windows)
    fwd = np.zeros((nmaps, 3, 2, n), dtype=np.int64)
    bwd = np.zeros((nmaps, 3, 2, n), dtype=np.int64)
    fwd[:, :, 0, :] = 1  # default empty
    bwd[:, :, 0, :] = 1

    def put(arr, k, ax, fl):
        f, l = fl
        arr[k, ax, 0, :f.shape[0]] = f
        arr[k, ax, 1, :l.shape[0]] = l

    ls, lu = fam.lambda_s, fam.lambda_u
    put(fwd, 0, 0, _ranges(ex, ls * ex[:-1], ls * ex[1:]))
    put(bwd, 0, 0, _ranges(ex, ex[:-1] / ls, ex[1:] / ls))
    put(fwd, 0, 1, _ranges(ey, m.eval_many(ey[:-1]), m.eval_many(ey[1:])))
    rlo, rhi = m.range
    ylo, yhi = np.maximum(ey[:-1], rlo), np.minimum(ey[1:], rhi)
    ok = yhi > ylo
    pre_lo = np.where(ok, m.inverse_many(np.where(ok, ylo, rlo)), np.nan)
    pre_hi = np.where(ok, m.inverse_many(np.where(ok, yhi, rhi)), np.nan)
    put(bwd, 0, 1, _ranges(ey, pre_lo, pre_hi))
    put(fwd, 0, 2, _ranges(ez, lu * ez[:-1], lu * ez[1:]))
    put(bwd, 0, 2, _ranges(ez, ez[:-1] / lu, ez[1:] / lu))
    shift = fam.shift
    for k, win in enumerate(fam.glue_windows, start=1):
        for ax, (e, iv) in enumerate(zip(edges, win)):
            lo, hi = np.maximum(e[:-1], iv.lo), np.minimum(e[1:], iv.hi)
            put(fwd, k, ax, _ranges(e, lo + shift[ax], hi + shift[ax]))
            plo = np.maximum(e[:-1] - shift[ax], iv.lo)
            phi = np.minimum(e[1:] - shift[ax], iv.hi)
            put(bwd, k, ax, _ranges(e, plo, phi))
    return _AxisMaps(fwd, bwd)


@njit(cache=True)
def _any_in(ret, r, k, ix, iy, iz):
    x0, x1 = r[k, 0, 0, ix], r[k, 0, 1, ix]
    y0, y1 = r[k, 1, 0, iy], r[k, 1, 1, iy]
    z0, z1 = r[k, 2, 0, iz], r[k, 2, 1, iz]
    if x0 > x1 or y0 > y1 or z0 > z1:
        return False
    for a in range(x0, x1 + 1):
        for b in range(y0, y1 + 1):
            for c in range(z0, z1 + 1):
                if ret[a, b, c]:
                    return True
    return False


@njit(cache=True)
def _has_neighbor(ret, r, ix, iy, iz):
    for k in range(r.shape[0]):
        if _any_in(ret, r, k, ix, iy, iz):
            return True
    return False


@njit(cache=True)
def _prune(ret, fwd, bwd, rounds):
    nx, ny, nz = ret.shape
    done = 0
    converged = False
    while done < rounds:
        changed = False
        nxt = ret.copy()
        for ix in range(nx):
            for iy in range(ny):
                for iz in range(nz):
                    if ret[ix, iy, iz]:
                        if not (_has_neighbor(ret, fwd, ix, iy, iz)
                                and _has_neighbor(ret, bwd, ix, iy, iz)):
                            nxt[ix, iy, iz] = False
                            changed = True
        done += 1
        if not changed:
            converged = True
            break
        ret[:, :, :] = nxt
    return done, converged


@njit(cache=True)
def _drop_mask(ret, fwd, bwd, boxes):
    out = np.zeros(boxes.shape[0], dtype=np.bool_)
    for i in range(boxes.shape[0]):
        ix, iy, iz = boxes[i, 0], boxes[i, 1], boxes[i, 2]
        out[i] = not (_has_neighbor(ret, fwd, ix, iy, iz) and _has_neighbor(ret, bwd, ix, iy, iz))
    return out


@njit(cache=True)
def _edges(index, fwd, boxes, fill, src, dst):
    cnt = 0
    for i in range(boxes.shape[0]):
        ix, iy, iz = boxes[i, 0], boxes[i, 1], boxes[i, 2]
        for k in range(fwd.shape[0]):
            x0, x1 = fwd[k, 0, 0, ix], fwd[k, 0, 1, ix]
            y0, y1 = fwd[k, 1, 0, iy], fwd[k, 1, 1, iy]
            z0, z1 = fwd[k, 2, 0, iz], fwd[k, 2, 1, iz]
            if x0 > x1 or y0 > y1 or z0 > z1:
                continue
            for a in range(x0, x1 + 1):
                for b in range(y0, y1 + 1):
                    for c in range(z0, z1 + 1):
                        j = index[a, b, c]
                        if j >= 0:
                            if fill:
                                src[cnt] = i
                                dst[cnt] = j
                            cnt += 1
    return cnt


def max_invariant_boxes(fam: SkewFamily, resolution=DEFAULT_RESOLUTION,
                        horizon: int = DEFAULT_HORIZON, neck_width: float | None = None,
                        max_boxes: int = MAX_BOXES) -> BoxSet:
    """Outer cover of the maximal invariant set in the cube.

    A box is retained while it has both a successor and a predecessor among
    the retained boxes; at most ``horizon`` pruning rounds are run.

    Raises:
        ValueError: ``horizon < 1`` or fewer than 8 cells on some axis.
        ResourceBudgetExceeded: The grid has more than ``max_boxes`` cells.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if min(np.broadcast_to(np.asarray(resolution), (3,))) < 8:
        raise ValueError("resolution must be >= 8 per axis")
    edges = grid_edges(fam, resolution, neck_width)
    shape = tuple(len(e) - 1 for e in edges)
    total = shape[0] * shape[1] * shape[2]
    if total > max_boxes:
        raise ResourceBudgetExceeded(f"{total} boxes exceed the budget of {max_boxes}")
    maps = _axis_maps(fam, edges)
    ret = np.ones(shape, dtype=np.bool_)
    rounds, converged = _prune(ret, maps.fwd, maps.bwd, int(horizon))
    boxes = np.argwhere(ret).astype(np.int64)
    pending = np.zeros(len(boxes), dtype=bool)
    if not converged and len(boxes):
        pending = _drop_mask(ret, maps.fwd, maps.bwd, boxes)
    labels = np.full(len(boxes), _CODE[Label.UNRESOLVED], dtype=np.int8)
    return BoxSet(shape, edges, boxes, labels, fam.t, fam.s, int(horizon), int(rounds),
                  bool(converged), pending)


def box_graph(fam: SkewFamily, boxset: BoxSet, max_edges: int = MAX_EDGES) -> csr_matrix:
    """Forward box graph restricted to the retained boxes.

    Raises:
        ResourceBudgetExceeded: More than ``max_edges`` edges.
    """
    maps = _axis_maps(fam, boxset.edges)
    index = np.full(boxset.resolution, -1, dtype=np.int64)
    n = len(boxset)
    if n:
        index[tuple(boxset.boxes.T)] = np.arange(n)
    dummy = np.zeros(0, dtype=np.int64)
    cnt = _edges(index, maps.fwd, boxset.boxes, False, dummy, dummy)
    if cnt > max_edges:
        raise ResourceBudgetExceeded(f"{cnt} edges exceed the budget of {max_edges}")
    src = np.zeros(cnt, dtype=np.int64)
    dst = np.zeros(cnt, dtype=np.int64)
    _edges(index, maps.fwd, boxset.boxes, True, src, dst)
    return csr_matrix((np.ones(cnt, dtype=np.int8), (src, dst)), shape=(n, n))


@njit(cache=True)
def _orbit_flags(knots, kinds, coef, pts, n, ls, lu, win, shift, cube, sep, qc, pc, rad):
    """Per sample: exit step (-1 if none), return above ``sep`` after being
    below it, and a Q -> P -> Q neighbourhood itinerary."""
    npts = pts.shape[0]
    exit_at = np.full(npts, -1, dtype=np.int64)
    back_above = np.zeros(npts, dtype=np.bool_)
    qpq = np.zeros(npts, dtype=np.bool_)
    qp = np.zeros(npts, dtype=np.bool_)
    nw = win.shape[0]
    for i in range(npts):
        x = pts[i, 0]
        y = pts[i, 1]
        z = pts[i, 2]
        below = False
        state = 0
        for k in range(n + 1):
            nq = max(abs(x - qc[0]), max(abs(y - qc[1]), abs(z - qc[2]))) <= rad
            npp = max(abs(x - pc[0]), max(abs(y - pc[1]), abs(z - pc[2]))) <= rad
            if state == 0 and nq:
                state = 1
            elif state == 1 and npp:
                state = 2
                qp[i] = True
            elif state == 2 and nq:
                state = 3
                qpq[i] = True
            if below and y >= sep:
                back_above[i] = True
            if y < sep:
                below = True
            if k == n:
                break
            glued = False
            for w in range(nw):
                if (win[w, 0] <= x <= win[w, 1] and win[w, 2] <= y <= win[w, 3]
                        and win[w, 4] <= z <= win[w, 5]):
                    x += shift[0]
                    y = (y - 1.0) + shift[1]
                    z += shift[2]
                    glued = True
                    break
            if not glued:
                x = ls * x
                y = kern.f_eval(knots, kinds, coef, y)
                z = lu * z
            if not (cube[0] <= x <= cube[1] and cube[2] <= y <= cube[3]
                    and cube[4] <= z <= cube[5]):
                exit_at[i] = k + 1
                break
    return exit_at, back_above, qp, qpq


def _flat(boxes: Sequence[Box]) -> np.ndarray:
    return np.array([[iv.lo, iv.hi][j] for b in boxes for iv in b for j in (0, 1)],
                    dtype=np.float64).reshape(len(boxes), 6)


def sample_orbits(fam: SkewFamily, pts: np.ndarray, horizon: int,
                  sep: float | None = None, radius: float = REGION_RADIUS):
    """Run many orbits in compiled code; see :func:`_orbit_flags` for the outputs."""
    sep = 0.0 if sep is None else float(sep)
    return _orbit_flags(*fam.central.arrays, np.ascontiguousarray(pts, dtype=np.float64),
                        int(horizon), fam.lambda_s, fam.lambda_u, _flat(fam.glue_windows),
                        np.array([GLUE_SHIFT_X, fam.t, GLUE_SHIFT_Z]), _flat([fam.cube])[0], sep,
                        np.array(fam.q), np.array(fam.p), float(radius))


def box_samples(boxset: BoxSet, idx: np.ndarray) -> np.ndarray:
    """Corners and center of each selected box, nine rows per box."""
    ex, ey, ez = boxset.edges
    b = boxset.boxes[idx]
    xs = np.stack([ex[b[:, 0]], ex[b[:, 0] + 1]], axis=1)
    ys = np.stack([ey[b[:, 1]], ey[b[:, 1] + 1]], axis=1)
    zs = np.stack([ez[b[:, 2]], ez[b[:, 2] + 1]], axis=1)
    rows = []
    for i in (0, 1):
        for j in (0, 1):
            for k in (0, 1):
                rows.append(np.stack([xs[:, i], ys[:, j], zs[:, k]], axis=1))
    rows.append(np.stack([xs.mean(1), ys.mean(1), zs.mean(1)], axis=1))
    return np.stack(rows, axis=1).reshape(-1, 3)


def _s_mask(boxset: BoxSet, fam: SkewFamily) -> np.ndarray:
    mask = np.zeros(len(boxset), dtype=bool)
    mask[boxset.containing(fam.saddles["S"])] = True
    return mask


def classify_boxes(fam: SkewFamily, boxset: BoxSet, horizon: int | None = None,
                   max_edges: int = MAX_EDGES) -> BoxSet:
    """Label retained boxes by the classes of P and Q and decide how they meet.

    Boxes in a nontrivial strongly connected component of the box graph that
    contains a box of P (of Q) are labelled LAMBDA_PLUS (LAMBDA_MINUS).  If
    one component holds both, the classes merge and the shared boxes are
    split by the sign of their central coordinate.  Otherwise the corners and
    centers of labelled boxes are iterated for ``horizon`` steps and a box
    whose sample climbs back over the separatrix after dropping below it is
    relabelled UNRESOLVED, as are boxes the unfinished pruning would drop.

    The verdict is MERGED for a shared component, DISJOINT when no two
    differently labelled boxes share a face, TOUCH_AT_S when every such
    contact involves a box containing S, and ADJACENT otherwise.
    """
    horizon = boxset.horizon if horizon is None else int(horizon)
    n = len(boxset)
    labels = np.full(n, _CODE[Label.WANDERING], dtype=np.int8)
    graph = box_graph(fam, boxset, max_edges)
    _, comp = connected_components(graph, directed=True, connection="strong")
    sizes = np.bincount(comp, minlength=comp.max() + 1 if n else 0)
    loops = np.zeros(n, dtype=bool)
    if n:
        loops = np.asarray(graph.diagonal() > 0)
    nontrivial = (sizes[comp] > 1) | loops
    p_comps = {int(comp[i]) for i in boxset.containing(fam.p) if nontrivial[i]}
    q_comps = {int(comp[i]) for i in boxset.containing(fam.q) if nontrivial[i]}
    plus = np.isin(comp, list(p_comps)) & nontrivial
    minus = np.isin(comp, list(q_comps)) & nontrivial
    merged = bool(p_comps & q_comps)
    if merged:
        yc = boxset.centers()[:, 1] if n else np.zeros(0)
        both = plus & minus
        plus = (plus & ~minus) | (both & (yc >= 0))
        minus = (minus & ~both) | (both & (yc < 0))
    labels[plus] = _CODE[Label.LAMBDA_PLUS]
    labels[minus] = _CODE[Label.LAMBDA_MINUS]
    sep = fam.separatrix
    if not merged and sep is not None:
        idx = np.nonzero(plus | minus)[0]
        if len(idx):
            _, back, _, _ = sample_orbits(fam, box_samples(boxset, idx), horizon, sep)
            bad = back.reshape(-1, 9).any(axis=1)
            labels[idx[bad]] = _CODE[Label.UNRESOLVED]
    labels[boxset.pending] = _CODE[Label.UNRESOLVED]
    boxset.labels = labels
    contacts = _contacts(fam, boxset)
    if merged:
        verdict = Verdict.MERGED
    elif contacts["plus_minus"] == 0:
        verdict = Verdict.DISJOINT
    elif contacts["plus_minus"] == contacts["plus_minus_at_s"]:
        verdict = Verdict.TOUCH_AT_S
    else:
        verdict = Verdict.ADJACENT
    contacts["shared_component"] = merged
    boxset.verdict = verdict
    boxset.contacts = contacts
    return boxset


def _contacts(fam: SkewFamily, boxset: BoxSet) -> dict:
    grid = np.full(boxset.resolution, -1, dtype=np.int8)
    smask = np.zeros(boxset.resolution, dtype=bool)
    if len(boxset):
        grid[tuple(boxset.boxes.T)] = boxset.labels
        smask[tuple(boxset.boxes[_s_mask(boxset, fam)].T)] = True
    P, M = _CODE[Label.LAMBDA_PLUS], _CODE[Label.LAMBDA_MINUS]
    total = at_s = 0
    for ax in range(3):
        a = [slice(None)] * 3
        b = [slice(None)] * 3
        a[ax] = slice(None, -1)
        b[ax] = slice(1, None)
        ga, gb = grid[tuple(a)], grid[tuple(b)]
        hit = ((ga == P) & (gb == M)) | ((ga == M) & (gb == P))
        total += int(hit.sum())
        at_s += int((hit & (smask[tuple(a)] | smask[tuple(b)])).sum())
    return {"plus_minus": total, "plus_minus_at_s": at_s}


@dataclass(frozen=True)
class TransitivityReport:
    """Sampled orbits that travel between the neighbourhoods of Q and P.

    Attributes:
        samples: Number of orbits.
        horizon: Steps per orbit.
        q_to_p: Orbits going from near Q to near P.
        q_to_p_to_q: Orbits going from near Q to near P and back near Q.
    """

    samples: int
    horizon: int
    q_to_p: int
    q_to_p_to_q: int

    @property
    def passed(self) -> bool:
        return self.q_to_p_to_q == 0


def non_transitivity_check(fam: SkewFamily, boxset: BoxSet, horizon: int | None = None,
                           radius: float = REGION_RADIUS) -> TransitivityReport:
    """Iterate the corners and center of every retained box and look for
    Q -> P -> Q itineraries between the ``radius`` neighbourhoods."""
    horizon = boxset.horizon if horizon is None else int(horizon)
    pts = box_samples(boxset, np.arange(len(boxset)))
    _, _, qp, qpq = sample_orbits(fam, pts, horizon, fam.separatrix, radius)
    return TransitivityReport(int(pts.shape[0]), horizon, int(qp.sum()), int(qpq.sum()))


def three_phase(central_factory, t: float, s_values: Sequence[float],
                resolution=DEFAULT_RESOLUTION, horizon: int = DEFAULT_HORIZON
                ) -> list[tuple[float, BoxSet]]:
    """Classify boxes for each ``s`` with ``central_factory(s)`` as central map."""
    out = []
    for s in s_values:
        fam = make_family(central_factory(s), t)
        bs = max_invariant_boxes(fam, resolution, horizon)
        out.append((float(s), classify_boxes(fam, bs, horizon)))
    return out


def covering_steps_bound(model: ReturnMapModel, J: tuple[float, float]) -> int:
    """A-priori bound on the returns needed by :func:`stable_Q_witness` (before the final one)."""
    return covering_bound(model, J[1] - J[0], model.ell_cert)
