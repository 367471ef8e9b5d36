"""Piecewise central maps of the hyperbolic, saddle-node and two-parameter families.

Each map is strictly increasing and C^1.  Near its hyperbolic fixed points
it is affine, near the saddle-node it is ``x + x**2 - s``, and in between it
is a cubic Hermite blend anchored at ``blend_knots``.  The affine pieces are
extended linearly up to the ends of the domain.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels as kern
from .errors import (
    FixedPointCountMismatch,
    InvalidSpec,
    IterationBudgetExceeded,
    NoConvergence,
    NonMonotoneBlend,
    OrbitLeftDomain,
    OutOfDomain,
    OutOfRange,
    SideConstraintViolated,
)

DEFAULT_DELTA = 0.1
DEFAULT_ENTRY_CAP = 1_000_000
K_SAFETY = 1.05
DERIV_MARGIN = 1e-9
CERT_GRID = 10_000


class Regime(str, enum.Enum):
    HYPERBOLIC = "HYPERBOLIC"
    SADDLE_NODE = "SADDLE_NODE"
    TWO_PARAM = "TWO_PARAM"


class PieceKind(str, enum.Enum):
    AFFINE = "AFFINE"
    QUADRATIC_SN = "QUADRATIC_SN"
    MONOTONE_BLEND = "MONOTONE_BLEND"


class Direction(str, enum.Enum):
    FORWARD = "FORWARD"
    BACKWARD = "BACKWARD"


_KIND_CODE = {
    PieceKind.AFFINE: kern.AFFINE,
    PieceKind.QUADRATIC_SN: kern.QUADRATIC,
    PieceKind.MONOTONE_BLEND: kern.CUBIC,
}


def default_domain(regime: Regime) -> tuple[float, float]:
    return (-2.0, 2.0) if regime is Regime.TWO_PARAM else (-1.0, 2.0)


@dataclass(frozen=True)
class CentralMapSpec:
    """Parameters of a central map.

    Attributes:
        regime: Which family the map belongs to.
        lam: Eigenvalue at the sink 1, in (0, 1).
        beta: Eigenvalue at the repelling end (0 or -1); ignored for SADDLE_NODE.
        delta: Half-width of the mandated local pieces.
        s: Saddle-node parameter (0 for HYPERBOLIC).
        domain: Closed interval the map is defined on.
        blend_knots: (abscissa, ordinate, slope) anchors of the blends.  Empty
            means the minimal set, i.e. the endpoints of every blend gap.
    """

    regime: Regime
    lam: float
    beta: float = 1.01
    delta: float = DEFAULT_DELTA
    s: float = 0.0
    domain: tuple[float, float] | None = None
    blend_knots: tuple[tuple[float, float, float], ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        if self.domain is None:
            object.__setattr__(self, "domain", default_domain(self.regime))
        else:
            object.__setattr__(self, "domain", tuple(float(v) for v in self.domain))
        object.__setattr__(
            self, "blend_knots", tuple(tuple(float(v) for v in k) for k in self.blend_knots)
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_dict(self) -> dict:
        return {
            "regime": self.regime.value,
            "lambda": self.lam,
            "beta": self.beta,
            "delta": self.delta,
            "s": self.s,
            "domain": list(self.domain),
            "blend_knots": [list(k) for k in self.blend_knots],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CentralMapSpec":
        return cls(
            regime=Regime(d["regime"]),
            lam=float(d["lambda"]),
            beta=float(d.get("beta", 1.01)),
            delta=float(d.get("delta", DEFAULT_DELTA)),
            s=float(d.get("s", 0.0)),
            domain=tuple(d["domain"]) if d.get("domain") is not None else None,
            blend_knots=tuple(tuple(k) for k in d.get("blend_knots", ())),
        )

    @classmethod
    def from_json(cls, text: str) -> "CentralMapSpec":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Piece:
    lo: float
    hi: float
    kind: PieceKind
    coefficients: tuple[float, ...]


@dataclass(frozen=True)
class FixedPoint:
    x: float
    slope: float
    stability: str  # "attractor" | "repellor" | "parabolic"


@dataclass(frozen=True, eq=False)
class CentralMap:
    """A built central map.

    Attributes:
        spec: The specification the map was built from.
        pieces: Ordered pieces tiling the domain.
        certified_deriv_bounds: (d_m, d_M) bounding F' on the whole domain.
        distortion_K: Bound for |F''|/F' on the core interval
            ([0,1], or [-1,1] in the two-parameter family).
    """

    spec: CentralMapSpec
    pieces: tuple[Piece, ...]
    certified_deriv_bounds: tuple[float, float]
    distortion_K: float
    knots: np.ndarray = field(repr=False)
    kinds: np.ndarray = field(repr=False)
    coef: np.ndarray = field(repr=False)

    @property
    def arrays(self):
        return self.knots, self.kinds, self.coef

    @property
    def domain(self) -> tuple[float, float]:
        return self.spec.domain

    @property
    def core_interval(self) -> tuple[float, float]:
        return (-1.0, 1.0) if self.spec.regime is Regime.TWO_PARAM else (0.0, 1.0)

    @property
    def range(self) -> tuple[float, float]:
        lo, hi = self.domain
        return (float(kern.f_eval(*self.arrays, lo)), float(kern.f_eval(*self.arrays, hi)))

    # pointwise evaluation -------------------------------------------------
    def _check(self, x: float) -> float:
        x = float(x)
        lo, hi = self.domain
        if not (lo <= x <= hi):
            raise OutOfDomain(f"x={x!r} outside domain [{lo}, {hi}]")
        return x

    def eval(self, x: float) -> float:
        return float(kern.f_eval(*self.arrays, self._check(x)))

    __call__ = eval

    def deriv(self, x: float) -> float:
        return float(kern.f_deriv(*self.arrays, self._check(x)))

    def second_deriv(self, x: float) -> float:
        return float(kern.f_second(*self.arrays, self._check(x)))

    def inverse(self, y: float) -> float:
        y = float(y)
        lo, hi = self.range
        if not (lo <= y <= hi):
            raise OutOfRange(f"y={y!r} outside range [{lo}, {hi}]")
        x = float(kern.f_inverse(*self.arrays, y))
        if math.isnan(x):
            raise NoConvergence(f"inverse did not converge at y={y!r}")
        return x

    def iterate(self, x: float, n: int) -> float:
        """n-fold forward (n > 0) or backward (n < 0) iterate."""
        x = float(x)
        n = int(n)
        if n == 0:
            return x
        if n > 0:
            self._check(x)
            v, done = kern.iterate_forward(*self.arrays, x, n)
            if done < n:
                raise OrbitLeftDomain(f"orbit of {x!r} left the domain", step=done + 1)
            return float(v)
        v, done = kern.iterate_backward(*self.arrays, x, -n)
        if done < -n:
            raise OrbitLeftDomain(f"backward orbit of {x!r} left the range", step=-(done + 1))
        return float(v)

    def iterate_with_deriv(self, x: float, n: int) -> tuple[float, float]:
        """Forward iterate and derivative of the n-fold composition."""
        v, d, done = kern.iterate_with_deriv(*self.arrays, self._check(x), int(n))
        if done < n:
            raise OrbitLeftDomain(f"orbit of {x!r} left the domain", step=done + 1)
        return float(v), float(d)

    def first_entry_time(self, x: float, target: tuple[float, float],
                         direction: Direction = Direction.FORWARD,
                         cap: int = DEFAULT_ENTRY_CAP) -> int:
        """Least n >= 0 whose (forward or backward) n-th iterate lies in ``target``."""
        if cap < 1:
            raise ValueError("cap must be >= 1")
        sign = 1 if Direction(direction) is Direction.FORWARD else -1
        n, _ = kern.first_entry(*self.arrays, float(x), float(target[0]), float(target[1]),
                                sign, int(cap))
        if n < 0:
            raise IterationBudgetExceeded(
                f"no entry into {target} within {cap} iterates", cap=cap)
        return int(n)

    # vectorised helpers -----------------------------------------------------
    def eval_many(self, xs) -> np.ndarray:
        return kern.eval_array(*self.arrays, np.ascontiguousarray(xs, dtype=np.float64))

    def deriv_many(self, xs) -> np.ndarray:
        return kern.deriv_array(*self.arrays, np.ascontiguousarray(xs, dtype=np.float64))

    def second_many(self, xs) -> np.ndarray:
        return kern.second_array(*self.arrays, np.ascontiguousarray(xs, dtype=np.float64))

    def inverse_many(self, ys) -> np.ndarray:
        return kern.inverse_array(*self.arrays, np.ascontiguousarray(ys, dtype=np.float64))

    def iterate_many(self, xs, n: int) -> np.ndarray:
        return kern.iterate_array(*self.arrays, np.ascontiguousarray(xs, dtype=np.float64),
                                  int(n))

    def iterate_with_deriv_many(self, xs, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Forward iterates and derivatives of the n-fold composition at each entry."""
        return kern.iterate_deriv_array(*self.arrays, np.ascontiguousarray(xs, dtype=np.float64),
                                        int(n))

    # certificates -----------------------------------------------------------
    def distortion_on(self, lo: float, hi: float, n: int = CERT_GRID) -> float:
        """Grid maximum of |F''|/F' on [lo, hi], inflated by the safety factor."""
        grid = _cert_grid(self.knots, lo, hi, n)
        ratio = np.abs(self.second_many(grid)) / self.deriv_many(grid)
        return float(ratio.max()) * K_SAFETY

    def fixed_points(self) -> list[FixedPoint]:
        return fixed_points(self)


def _cert_grid(knots: np.ndarray, lo: float, hi: float, n: int) -> np.ndarray:
    """Uniform grid on [lo, hi] plus both one-sided neighbours of every knot inside."""
    grid = np.linspace(lo, hi, n)
    inner = knots[(knots > lo) & (knots < hi)]
    extra = np.concatenate([inner, np.nextafter(inner, -np.inf), np.nextafter(inner, np.inf)])
    return np.unique(np.concatenate([grid, extra]))


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _mandated_pieces(spec: CentralMapSpec) -> list[tuple[float, float, PieceKind, tuple]]:
    """Mandated local pieces and their affine extensions, in order (blend gaps omitted)."""
    lam, beta, d, s = spec.lam, spec.beta, spec.delta, spec.s
    lo, hi = spec.domain
    near_one = [(1 - d, 1 + d, PieceKind.AFFINE, (1.0, lam, 1.0)),
                (1 + d, hi, PieceKind.AFFINE, (1.0, lam, 1.0))]
    if spec.regime is Regime.HYPERBOLIC:
        return [(lo, -d, PieceKind.AFFINE, (0.0, beta, 0.0)),
                (-d, d, PieceKind.AFFINE, (0.0, beta, 0.0))] + near_one
    quad = [(-d, d, PieceKind.QUADRATIC_SN, (s,))]
    if spec.regime is Regime.SADDLE_NODE:
        return quad + near_one
    return [(lo, -1 - d, PieceKind.AFFINE, (-1.0, beta, -1.0)),
            (-1 - d, -1 + d, PieceKind.AFFINE, (-1.0, beta, -1.0))] + quad + near_one


def _piece_value(kind: PieceKind, c: tuple, x: float) -> tuple[float, float]:
    if kind is PieceKind.AFFINE:
        return c[0] + c[1] * (x - c[2]), c[1]
    return x + x * x - c[0], 1.0 + 2.0 * x


def default_blend_knots(spec: CentralMapSpec) -> tuple[tuple[float, float, float], ...]:
    """Endpoint anchors of every blend gap, read off the mandated pieces."""
    pieces = _mandated_pieces(spec)
    lo = spec.domain[0]
    knots = []
    if pieces[0][0] > lo:
        # saddle-node family: the left gap starts at the domain end, anchored
        # with slope 1 and F(x) - x equal to its value at -delta
        d, s = spec.delta, spec.s
        knots.append((lo, lo + d * d - s, 1.0))
    prev_hi = None
    for a, b, kind, c in pieces:
        if prev_hi is not None and a > prev_hi:
            kind_prev, c_prev = prev_piece
            y0, m0 = _piece_value(kind_prev, c_prev, prev_hi)
            y1, m1 = _piece_value(kind, c, a)
            knots.extend([(prev_hi, y0, m0), (a, y1, m1)])
        elif prev_hi is None and a > lo:
            y1, m1 = _piece_value(kind, c, a)
            knots.append((a, y1, m1))
        prev_hi = b
        prev_piece = (kind, c)
    return tuple(knots)


def _hermite_coef(x0, y0, m0, x1, y1, m1) -> tuple[float, float, float, float]:
    h = x1 - x0
    sec = (y1 - y0) / h
    c2 = (3.0 * sec - 2.0 * m0 - m1) / h
    c3 = (m0 + m1 - 2.0 * sec) / (h * h)
    return (y0, m0, c2, c3)


def _cubic_deriv_min(coef: tuple, h: float) -> float:
    """Exact minimum of the derivative of the cubic over u in [0, h]."""
    _, b, c, d = coef
    cands = [b, b + h * (2 * c + 3 * h * d)]
    if d != 0.0:
        u = -c / (3.0 * d)
        if 0.0 < u < h:
            cands.append(b + u * (2 * c + 3 * u * d))
    return min(cands)


def _cubic_deriv_max(coef: tuple, h: float) -> float:
    _, b, c, d = coef
    cands = [b, b + h * (2 * c + 3 * h * d)]
    if d != 0.0:
        u = -c / (3.0 * d)
        if 0.0 < u < h:
            cands.append(b + u * (2 * c + 3 * u * d))
    return max(cands)


def _validate(spec: CentralMapSpec) -> None:
    if not (0.0 < spec.lam < 1.0):
        raise InvalidSpec(f"lambda={spec.lam} must lie in (0, 1)")
    if spec.delta <= 0.0:
        raise InvalidSpec("delta must be positive")
    if spec.regime is not Regime.SADDLE_NODE and not spec.beta > 1.0:
        raise InvalidSpec(f"beta={spec.beta} must exceed 1")
    if spec.regime is Regime.HYPERBOLIC and spec.s != 0.0:
        raise InvalidSpec("the hyperbolic family has s = 0")
    if spec.regime is Regime.SADDLE_NODE and not (2 / 3 < spec.lam < 1):
        raise SideConstraintViolated(f"lambda={spec.lam} outside (2/3, 1)")
    if spec.regime is Regime.TWO_PARAM and not (2 / 3 < spec.lam < 1 < spec.beta < 1.5):
        raise SideConstraintViolated(
            f"need 2/3 < lambda < 1 < beta < 3/2, got lambda={spec.lam}, beta={spec.beta}")
    if spec.regime is not Regime.HYPERBOLIC and abs(spec.s) >= spec.delta ** 2:
        raise InvalidSpec("|s| must be smaller than delta**2 so the saddle-node stays local")
    lo, hi = spec.domain
    if spec.regime is Regime.TWO_PARAM:
        ok = lo < -1 - spec.delta and hi > 1 + spec.delta
    else:
        ok = lo < -spec.delta and hi > 1 + spec.delta
    if not ok or spec.delta >= 0.5:
        raise InvalidSpec("domain must contain the mandated pieces")
    ks = spec.blend_knots
    for (xa, ya, ma), (xb, yb, mb) in zip(ks, ks[1:]):
        if not (xb > xa and yb > ya):
            raise InvalidSpec("blend_knots must increase in abscissa and ordinate")
    if any(k[2] <= 0 for k in ks):
        raise InvalidSpec("blend_knots slopes must be positive")


def build_central_map(spec: CentralMapSpec) -> CentralMap:
    """Assemble, verify and certify a central map.

    Raises:
        InvalidSpec: Parameters or knots are inconsistent.
        NonMonotoneBlend: A blend segment has a non-positive derivative.
        FixedPointCountMismatch: Fixed points differ from the regime's mandate.
    """
    _validate(spec)
    if not spec.blend_knots:
        spec = CentralMapSpec(regime=spec.regime, lam=spec.lam, beta=spec.beta,
                              delta=spec.delta, s=spec.s, domain=spec.domain,
                              blend_knots=default_blend_knots(spec))
    mandated = _mandated_pieces(spec)
    lo, hi = spec.domain
    # blend gaps between consecutive mandated pieces (and before the first)
    gaps = []
    if mandated[0][0] > lo:
        gaps.append((lo, mandated[0][0], None, mandated[0]))
    for p, q in zip(mandated, mandated[1:]):
        if q[0] > p[1]:
            gaps.append((p[1], q[0], p, q))
    knots = spec.blend_knots
    pieces: list[Piece] = []
    blends: dict[float, list[Piece]] = {}
    for g0, g1, left, right in gaps:
        inside = [k for k in knots if g0 - 1e-15 <= k[0] <= g1 + 1e-15]
        if len(inside) < 2 or abs(inside[0][0] - g0) > 1e-15 or abs(inside[-1][0] - g1) > 1e-15:
            raise InvalidSpec(f"blend gap [{g0}, {g1}] needs knots at both ends")
        for anchor, piece in ((inside[0], left), (inside[-1], right)):
            if piece is None:
                continue
            y, m = _piece_value(piece[2], piece[3], anchor[0])
            if abs(anchor[1] - y) > 1e-12 or abs(anchor[2] - m) > 1e-12:
                raise InvalidSpec(f"blend knot {anchor} disagrees with the mandated piece")
        segs = []
        for (x0, y0, m0), (x1, y1, m1) in zip(inside, inside[1:]):
            c = _hermite_coef(x0, y0, m0, x1, y1, m1)
            if _cubic_deriv_min(c, x1 - x0) <= 0.0:
                raise NonMonotoneBlend(f"blend on [{x0}, {x1}] is not strictly increasing")
            segs.append(Piece(x0, x1, PieceKind.MONOTONE_BLEND, c))
        blends[g0] = segs
    for g0 in [g[0] for g in gaps if g[0] == lo]:
        pieces.extend(blends[g0])
    for a, b, kind, c in mandated:
        pieces.append(Piece(a, b, kind, tuple(float(v) for v in c)))
        if b in blends:
            pieces.extend(blends[b])
    knots_arr = np.array([p.lo for p in pieces] + [pieces[-1].hi], dtype=np.float64)
    kinds_arr = np.array([_KIND_CODE[p.kind] for p in pieces], dtype=np.int64)
    coef_arr = np.zeros((len(pieces), 4), dtype=np.float64)
    for j, p in enumerate(pieces):
        coef_arr[j, : len(p.coefficients)] = p.coefficients
    dmin, dmax = _deriv_extremes(pieces)
    bounds = (dmin * (1 - DERIV_MARGIN), dmax * (1 + DERIV_MARGIN))
    if bounds[0] <= 0:
        raise NonMonotoneBlend("derivative is not bounded away from zero")
    proto = CentralMap(spec, tuple(pieces), bounds, 0.0, knots_arr, kinds_arr, coef_arr)
    core = proto.core_interval
    K = proto.distortion_on(*core)
    m = CentralMap(spec, tuple(pieces), bounds, K, knots_arr, kinds_arr, coef_arr)
    _check_fixed_point_count(m)
    return m


def _deriv_extremes(pieces: Sequence[Piece]) -> tuple[float, float]:
    lows, highs = [], []
    for p in pieces:
        if p.kind is PieceKind.AFFINE:
            lows.append(p.coefficients[1])
            highs.append(p.coefficients[1])
        elif p.kind is PieceKind.QUADRATIC_SN:
            lows.append(1 + 2 * p.lo)
            highs.append(1 + 2 * p.hi)
        else:
            lows.append(_cubic_deriv_min(p.coefficients, p.hi - p.lo))
            highs.append(_cubic_deriv_max(p.coefficients, p.hi - p.lo))
    return min(lows), max(highs)


# ---------------------------------------------------------------------------
# fixed points
# ---------------------------------------------------------------------------

def _piece_roots(p: Piece) -> list[float]:
    """Exact zeros of F(x) - x on one piece."""
    c = p.coefficients
    if p.kind is PieceKind.AFFINE:
        if c[1] == 1.0:
            return []
        x = (c[0] - c[1] * c[2]) / (1.0 - c[1])
        return [x] if p.lo <= x <= p.hi else []
    if p.kind is PieceKind.QUADRATIC_SN:
        s = c[0]
        if s < 0:
            return []
        if s == 0:
            return [0.0] if p.lo <= 0.0 <= p.hi else []
        r = math.sqrt(s)
        return [x for x in (-r, r) if p.lo <= x <= p.hi]
    # cubic in u = x - lo: a + b u + c u^2 + d u^3 - (lo + u)
    a, b, cc, d = c
    roots = np.roots([d, cc, b - 1.0, a - p.lo])
    h = p.hi - p.lo
    out = []
    for r in roots:
        if abs(r.imag) < 1e-12 and -1e-14 <= r.real <= h + 1e-14:
            out.append(p.lo + float(r.real))
    return out


def fixed_points(m: CentralMap) -> list[FixedPoint]:
    """All fixed points on the domain with slope and stability label."""
    xs: list[float] = []
    for p in m.pieces:
        # only roots of different pieces can coincide (at a shared endpoint);
        # +-sqrt(s) of one quadratic piece stay distinct however close
        prev = list(xs)
        for x in _piece_roots(p):
            if not any(abs(x - y) < 1e-12 for y in prev):
                xs.append(x)
    out = []
    for x in sorted(xs):
        slope = m.deriv(x)
        if abs(slope - 1.0) < 1e-12:
            kind = "parabolic"
        elif slope > 1.0:
            kind = "repellor"
        else:
            kind = "attractor"
        out.append(FixedPoint(float(x) + 0.0, float(slope), kind))
    return out


def expected_fixed_point_count(spec: CentralMapSpec) -> int:
    s = spec.s
    if spec.regime is Regime.HYPERBOLIC:
        return 2
    if spec.regime is Regime.SADDLE_NODE:
        return 1 if s < 0 else (2 if s == 0 else 3)
    return 2 if s < 0 else (3 if s == 0 else 4)


def _check_fixed_point_count(m: CentralMap) -> None:
    fps = fixed_points(m)
    want = expected_fixed_point_count(m.spec)
    if len(fps) != want:
        raise FixedPointCountMismatch(
            f"{m.spec.regime.value} with s={m.spec.s} has {len(fps)} fixed points, "
            f"expected {want}: {[f.x for f in fps]}")
    # grid cross-check: sign changes of F(x) - x must not exceed the isolated count
    lo, hi = m.domain
    grid = np.linspace(lo, hi, CERT_GRID)
    g = m.eval_many(grid) - grid
    changes = int(np.count_nonzero(np.sign(g[1:]) * np.sign(g[:-1]) < 0))
    if changes > want:
        raise FixedPointCountMismatch(f"grid shows {changes} sign changes, expected <= {want}")


# ---------------------------------------------------------------------------
# module-level functional interface
# ---------------------------------------------------------------------------

def evaluate(m: CentralMap, x: float) -> float:
    return m.eval(x)


def deriv(m: CentralMap, x: float) -> float:
    return m.deriv(x)


def second_deriv(m: CentralMap, x: float) -> float:
    return m.second_deriv(x)


def inverse(m: CentralMap, y: float) -> float:
    return m.inverse(y)


def iterate(m: CentralMap, x: float, n: int) -> float:
    return m.iterate(x, n)


def first_entry_time(m: CentralMap, x: float, target: tuple[float, float],
                     direction: Direction = Direction.FORWARD,
                     cap: int = DEFAULT_ENTRY_CAP) -> int:
    return m.first_entry_time(x, target, direction, cap)


def hyperbolic(lam: float = 0.95, beta: float = 1.01, delta: float = DEFAULT_DELTA) -> CentralMap:
    return build_central_map(CentralMapSpec(Regime.HYPERBOLIC, lam, beta, delta, 0.0))


def saddle_node(lam: float = 0.999, s: float = 0.0, delta: float = DEFAULT_DELTA) -> CentralMap:
    return build_central_map(CentralMapSpec(Regime.SADDLE_NODE, lam, 1.01, delta, s))


def two_param(lam: float = 0.999, beta: float = 1.001, s: float = 0.0,
              delta: float = DEFAULT_DELTA) -> CentralMap:
    return build_central_map(CentralMapSpec(Regime.TWO_PARAM, lam, beta, delta, s))
