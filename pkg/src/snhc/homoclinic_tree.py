"""Nested sequences of homoclinic points accumulating on the neck domain.

With ``N = kappa_t + alpha_t`` and ``h_j(x) = (t - 1) + F^(N + j)(x)`` the
point with multi-index ``(i_1, ..., i_m)`` is ``h_{i_1} o ... o h_{i_m}(t)``.
The sequence below a node ``P`` is ``S_P = (x_{P,i})_i`` and satisfies
``S_{(j,) + P} = h_j(S_P)``; the first generation is ``S_() = (h_i(t))_i``.

Consecutive generations shrink by the contraction constant of the
saddle-node regime, which is far smaller than 1/2, so every value is
carried in double-double arithmetic (``x`` plus a low-order word).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as kern
from .central_maps import CentralMap
from .domains import DomainLadder, LadderRegime
from .errors import IterationBudgetExceeded, NodeMissing, PreconditionFailed, WindowViolated
from .hypotheses import check_SN
from .interval import Interval

DEFAULT_DEPTH = 8
DEFAULT_WIDTH = 64
ROOT_TAIL = 1e-4  # first generation runs until t - x_n <= ROOT_TAIL * |Delta(0)|
FLOOR_REL = 1e-15
RECURRENCE_RTOL = 1e-12
ROOT_CAP = 10_000_000
PLACEHOLDER_B = -0.5

Key = tuple[int, ...]


@dataclass(frozen=True)
class Node:
    """One homoclinic point; ``x`` and ``y`` carry a low-order correction word."""

    x: float
    x_lo: float
    y: float
    y_lo: float
    generation: int
    b: float = PLACEHOLDER_B


@dataclass(frozen=True)
class PrecisionFloor:
    """Why extension stopped: a sequence diameter fell below the floor."""

    prefix: Key
    generation: int
    diameter: float
    floor: float


@dataclass
class HomoclinicTree:
    """Mutable store of the nested sequences.

    Attributes:
        t: Scale parameter.
        map: Saddle-node central map.
        ladder: Domains at ``t``.
        kappa_alpha: ``(kappa_t, alpha_t)``.
        nodes: Points keyed by multi-index.
        sequences: For each expanded prefix, the stored child indices.
        window: Child indices stored for every non-root sequence.
        gen_diameters: Diameter of the all-zeros sequence per generation.
        depth: Largest generation requested.
        per_gen_width: Children per sequence and sequences added per round.
        floor: Set when a sequence was refused by the precision floor.
    """

    t: float
    map: CentralMap
    ladder: DomainLadder
    kappa_alpha: tuple[int, int]
    nodes: dict[Key, Node] = field(default_factory=dict)
    sequences: dict[Key, tuple[int, ...]] = field(default_factory=dict)
    window: tuple[int, ...] = ()
    gen_diameters: list[float] = field(default_factory=list)
    depth: int = DEFAULT_DEPTH
    per_gen_width: int = DEFAULT_WIDTH
    floor: PrecisionFloor | None = None
    offset: tuple[float, float] = (0.0, 0.0)
    refused: set = field(default_factory=set)

    @property
    def n_steps(self) -> int:
        return self.kappa_alpha[0] + self.kappa_alpha[1]

    @property
    def neck_domain(self) -> Interval:
        """The fundamental domain [F^-1(t), t] that the points should fill."""
        return self.ladder.delta_chain[0]

    @property
    def realized_depth(self) -> int:
        return max((len(p) for p in self.sequences), default=0)

    def value(self, key: Key) -> tuple[float, float]:
        """Double-double value of any multi-index, stored or not."""
        node = self.nodes.get(key)
        if node is not None:
            return node.x, node.x_lo
        xh, xl = np.array([self.t]), np.array([0.0])
        for j in reversed(key):
            xh, xl, _, _ = _h(self, j, xh, xl)
        return float(xh[0]), float(xl[0])

    def limit(self, prefix: Key) -> tuple[float, float]:
        return (self.t, 0.0) if not prefix else self.value(prefix)

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "kappa_t": self.kappa_alpha[0],
            "alpha_t": self.kappa_alpha[1],
            "depth": self.depth,
            "per_gen_width": self.per_gen_width,
            "gen_diameters": list(self.gen_diameters),
            "precision_floor": None if self.floor is None else {
                "prefix": _dotted(self.floor.prefix), "generation": self.floor.generation,
                "diameter": self.floor.diameter, "floor": self.floor.floor},
            "nodes": {_dotted(k): {"x": n.x, "x_lo": n.x_lo, "y": n.y, "y_lo": n.y_lo,
                                   "b": n.b, "generation": n.generation}
                      for k, n in sorted(self.nodes.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("multi_index", "generation", "x", "y"))
        for k, n in sorted(self.nodes.items()):
            w.writerow((_dotted(k), n.generation, repr(n.x), repr(n.y)))
        return buf.getvalue()


def _dotted(key: Key) -> str:
    return ".".join(str(i) for i in key)


def _h(tree: HomoclinicTree, j: int, xh: np.ndarray, xl: np.ndarray):
    """Apply h_j entrywise; returns (x_hi, x_lo, y_hi, y_lo)."""
    arrays = tree.map.arrays
    oh, ol = tree.offset
    yh, yl = kern.shifted_power_dd(*arrays, np.ascontiguousarray(xh), np.ascontiguousarray(xl),
                                   tree.n_steps + int(j), 0.0, 0.0)
    outh, outl = kern.shifted_power_dd(*arrays, yh, yl, 0, oh, ol)
    return outh, outl, yh, yl


def _dd_sub(a: tuple[float, float], b: tuple[float, float]) -> float:
    h, l = kern.dd_add(a[0], a[1], -b[0], -b[1])
    return h + l


def _dd_less(a: tuple[float, float], b: tuple[float, float]) -> bool:
    return _dd_sub(b, a) > 0


def _require_sn(m: CentralMap, ladder: DomainLadder) -> None:
    if ladder.regime is not LadderRegime.SADDLE_NODE:
        raise PreconditionFailed("the homoclinic tree needs a saddle-node ladder")
    rep = check_SN(m.spec.lam, m.distortion_K)
    if not rep.passed:
        raise PreconditionFailed(f"(SN) fails: lhs={rep.lhs}")


def _offset(t: float) -> tuple[float, float]:
    return kern.dd_add(t, 0.0, -1.0, 0.0)


def _first_generation_dd(m: CentralMap, ladder: DomainLadder, n_max: int,
                         offset: tuple[float, float]) -> tuple[np.ndarray, ...]:
    n0 = ladder.kappa_t + ladder.alpha_t
    yh, yl = kern.orbit_dd_sweep(*m.arrays, ladder.t, 0.0, n0, int(n_max))
    if not np.all(np.isfinite(yh)):
        raise IterationBudgetExceeded("first generation left the domain", cap=n_max)
    xh, xl = kern.shifted_power_dd(*m.arrays, yh, yl, 0, offset[0], offset[1])
    return xh, xl, yh, yl


def first_generation(m: CentralMap, ladder: DomainLadder, n_max: int) -> np.ndarray:
    """Points ``x_i = (t - 1) + F^(N + i)(t)`` for i < n_max (leading words).

    Raises:
        PreconditionFailed: Not a saddle-node ladder or (SN) fails.
    """
    _require_sn(m, ladder)
    return _first_generation_dd(m, ladder, n_max, _offset(ladder.t))[0]


def root_length(m: CentralMap, ladder: DomainLadder, tail: float = ROOT_TAIL,
                cap: int = ROOT_CAP) -> int:
    """Smallest n with t - x_n <= tail * |Delta(0)|, plus one."""
    t = ladder.t
    target = 1.0 - tail * ladder.delta_chain[0].length
    y0 = m.iterate(t, ladder.kappa_t + ladder.alpha_t)
    n, _ = kern.first_entry(*m.arrays, y0, target, math.inf, 1, cap)
    if n < 0:
        raise IterationBudgetExceeded("first generation does not reach the tail", cap=cap)
    return int(n) + 1


def _spread_window(ladder: DomainLadder, root_x: np.ndarray, width: int) -> tuple[int, ...]:
    """Index 0 plus ``width - 1`` evenly spaced indices from just below Delta(0) to the end.

    Evenly spaced indices are evenly spaced in log-distance to t, the
    natural scale of the first generation.
    """
    n = root_x.shape[0]
    lo = ladder.delta_chain[0].lo
    entry = max(int(np.searchsorted(root_x, lo)) - 1, 1)
    spread = np.unique(np.round(np.linspace(entry, n - 1, max(width - 1, 1))).astype(int))
    return tuple(sorted({0, *spread.tolist()}))


def _store_sequence(tree: HomoclinicTree, prefix: Key, xh, xl, yh, yl, idx) -> None:
    gen = len(prefix)
    for c, i in enumerate(idx):
        key = prefix + (int(i),)
        if key not in tree.nodes:
            tree.nodes[key] = Node(float(xh[c]), float(xl[c]), float(yh[c]), float(yl[c]), gen)
    tree.sequences[prefix] = tuple(int(i) for i in idx)


def _floor_value(tree: HomoclinicTree) -> float:
    return FLOOR_REL * tree.neck_domain.length


def _sequence_diameter(tree: HomoclinicTree, prefix: Key) -> float:
    first = tree.value(prefix + (0,))
    return _dd_sub(tree.limit(prefix), first)


def extend(tree: HomoclinicTree, prefix: Key, j: int, n_max: int | None = None) -> HomoclinicTree:
    """Add the sequence ``S_{(j,) + prefix} = h_j(S_prefix)`` and its limit point.

    Args:
        tree: Tree to grow in place.
        prefix: An expanded prefix (``()`` is the first generation).
        j: Leading index, ``j >= 0``.
        n_max: Optional cap on the number of entries taken from ``S_prefix``.

    Raises:
        NodeMissing: ``prefix`` has not been expanded.
    """
    prefix = tuple(int(i) for i in prefix)
    if prefix not in tree.sequences:
        raise NodeMissing(f"sequence {_dotted(prefix) or '()'} is not stored")
    if j < 0:
        raise ValueError("j must be non-negative")
    new = (int(j),) + prefix
    if new in tree.sequences:
        return tree
    src = tree.sequences[prefix]
    idx = list(src) if prefix else list(tree.window)
    if n_max is not None:
        idx = idx[:n_max]
    xh = np.array([tree.nodes[prefix + (i,)].x for i in idx])
    xl = np.array([tree.nodes[prefix + (i,)].x_lo for i in idx])
    oh, ol, yh, yl = _h(tree, j, xh, xl)
    floor = _floor_value(tree)
    lim = tree.value(new)
    diam = _dd_sub(lim, (float(oh[0]), float(ol[0]))) if idx and idx[0] == 0 else math.inf
    if diam < floor:
        tree.refused.add(new)
        if tree.floor is None or len(new) < tree.floor.generation:
            tree.floor = PrecisionFloor(new, len(new), diam, floor)
        return tree
    _store_sequence(tree, new, oh, ol, yh, yl, idx)
    if new not in tree.nodes:
        yv = kern.dd_add(lim[0], lim[1], -tree.offset[0], -tree.offset[1])
        tree.nodes[new] = Node(lim[0], lim[1], yv[0], yv[1], len(new) - 1)
    return tree


def _ensure_sequence(tree: HomoclinicTree, prefix: Key) -> bool:
    """Build ``S_prefix`` through its chain of suffixes; False when refused."""
    if prefix in tree.sequences:
        return True
    if prefix in tree.refused:
        return False
    if not _ensure_sequence(tree, prefix[1:]):
        return False
    extend(tree, prefix[1:], prefix[0])
    return prefix in tree.sequences


def _gaps(tree: HomoclinicTree) -> list[tuple[float, Key | None]]:
    """Gaps between consecutive stored points inside Delta(0), keyed by their upper point."""
    d0 = tree.neck_domain
    pts = [((n.x, n.x_lo), k) for k, n in tree.nodes.items() if d0.lo <= n.x + n.x_lo <= d0.hi]
    pts.sort(key=lambda p: (p[0][0], p[0][1]))
    seq = [((d0.lo, 0.0), None)] + pts + [((d0.hi, 0.0), None)]
    out = []
    for (pa, _), (pb, kb) in zip(seq, seq[1:]):
        out.append((_dd_sub(pb, pa), kb))
    return out


def density_gap(tree: HomoclinicTree) -> float:
    """Largest gap between stored points in Delta(0), relative to |Delta(0)|."""
    if not tree.nodes:
        return 1.0
    return max(g for g, _ in _gaps(tree)) / tree.neck_domain.length


def _refine_round(tree: HomoclinicTree, max_generation: int) -> int:
    """Expand the sequences below the points that top the largest gaps."""
    cands = sorted(((g, k) for g, k in _gaps(tree)
                    if k is not None and len(k) <= max_generation
                    and k not in tree.sequences and k not in tree.refused),
                   key=lambda gk: (-gk[0], gk[1]))
    added = 0
    for _, key in cands[:tree.per_gen_width]:
        if _ensure_sequence(tree, key):
            added += 1
    return added


def build_tree(m: CentralMap, ladder: DomainLadder, depth: int = DEFAULT_DEPTH,
               width: int = DEFAULT_WIDTH, root_len: int | None = None,
               offset: float | None = None) -> HomoclinicTree:
    """Grow the tree generation by generation.

    Generation 0 is the first generation run far enough to approach t; the
    all-zeros spine is extended to ``depth`` (or the precision floor) and
    each generation also expands ``width`` sequences under the largest
    remaining gaps of Delta(0).

    Args:
        m: Saddle-node map.
        ladder: Ladder at the working ``t``.
        depth: Largest generation.
        width: Children per sequence and sequences per refinement round.
        root_len: Length of the first generation (default: reach ROOT_TAIL).
        offset: Gluing offset override; only for checker sanity tests.

    Raises:
        PreconditionFailed: Not a saddle-node ladder or (SN) fails.
    """
    _require_sn(m, ladder)
    n_root = root_length(m, ladder) if root_len is None else int(root_len)
    off = _offset(ladder.t) if offset is None else (float(offset), 0.0)
    tree = HomoclinicTree(ladder.t, m, ladder, (ladder.kappa_t, ladder.alpha_t), depth=depth,
                          per_gen_width=width, offset=off)
    xh, xl, yh, yl = _first_generation_dd(m, ladder, n_root, off)
    _store_sequence(tree, (), xh, xl, yh, yl, range(n_root))
    tree.window = _spread_window(ladder, xh, width)
    tree.gen_diameters.append(_sequence_diameter(tree, ()))
    tree.depth = 0
    return grow(tree, depth)


def grow(tree: HomoclinicTree, depth: int) -> HomoclinicTree:
    """Continue the construction of ``build_tree`` up to generation ``depth``."""
    for gen in range(tree.depth + 1, depth + 1):
        spine = (0,) * gen
        if tree.floor is None and _ensure_sequence(tree, spine):
            tree.gen_diameters.append(_sequence_diameter(tree, spine))
        _refine_round(tree, gen)
    tree.depth = max(tree.depth, depth)
    return tree


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PropertyResult:
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class HReport:
    results: dict[str, PropertyResult]

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.results.values())

    def failing(self) -> list[str]:
        return [k for k, r in self.results.items() if not r.passed]

    def to_dict(self) -> dict:
        return {k: {"pass": r.passed, "detail": r.detail} for k, r in self.results.items()}


def recurrence_residual(tree: HomoclinicTree, key: Key) -> float:
    """Relative mismatch between a stored node and its recomputation from the parent."""
    node = tree.nodes[key]
    base = tree.limit(key[1:])
    oh, ol, _, _ = _h(tree, key[0], np.array([base[0]]), np.array([base[1]]))
    return abs(_dd_sub((float(oh[0]), float(ol[0])), (node.x, node.x_lo))) / abs(node.x)


def verify_H(tree: HomoclinicTree, recurrence_samples: int = 256) -> HReport:
    """Check every listed property on all stored nodes and sequences."""
    res: dict[str, PropertyResult] = {}
    chain = tree.ladder.delta_chain
    hull = Interval(chain[-1].lo, chain[0].hi)
    bad = [k for k, n in tree.nodes.items() if not (hull.lo <= n.x + n.x_lo <= hull.hi)]
    res["H1"] = PropertyResult(not bad, f"{len(bad)} nodes outside the chain union")

    diam = tree.gen_diameters
    bad2 = []
    for p, idx in tree.sequences.items():
        lim = tree.limit(p)
        vals = [(tree.nodes[p + (i,)].x, tree.nodes[p + (i,)].x_lo) for i in idx]
        inc = all(_dd_less(a, b) for a, b in zip(vals, vals[1:]))
        below = all(_dd_less(v, lim) for v in vals)
        tail_ok = len(p) >= len(diam) or _dd_sub(lim, vals[-1]) <= diam[len(p)]
        if not (inc and below and tail_ok):
            bad2.append(p)
    res["H2"] = PropertyResult(not bad2, f"{len(bad2)} sequences not increasing to their limit")
    res["H2b"] = res["H2"]

    bad3 = []
    for p in tree.sequences:
        if p and p[-1] >= 1:
            left = tree.value(p[:-1] + (p[-1] - 1,))
            if not _dd_less(tree.value(p + (0,)), left):
                bad3.append(p)
    res["H3"] = PropertyResult(not bad3, f"{len(bad3)} violations of x_(P,0) < x_(P-1)")
    res["H3b"] = res["H3"]

    halving = all(d > 0 for d in diam) and all(b <= a / 2 for a, b in zip(diam, diam[1:]))
    res["H4b"] = PropertyResult(halving, f"diameters {diam}")
    per_gen: dict[int, float] = {}
    for p in tree.sequences:
        per_gen[len(p)] = max(per_gen.get(len(p), 0.0), _sequence_diameter(tree, p))
    bounded = all(per_gen[g] <= diam[g] * (1 + 1e-12) for g in per_gen if g < len(diam))
    res["H4"] = PropertyResult(bounded and halving,
                               "generation diameters bounded by the all-zeros diameter")

    root = tree.sequences.get((), ())
    rv = [(tree.nodes[(i,)].x, tree.nodes[(i,)].x_lo) for i in root]
    h5 = bool(rv) and all(_dd_less(a, b) for a, b in zip(rv, rv[1:])) and _dd_less(rv[-1], (tree.t, 0.0))
    res["H5"] = PropertyResult(h5, "first generation increasing towards t")
    x0 = tree.nodes[(0,)].x if (0,) in tree.nodes else math.nan
    h6 = chain[1].contains(x0, 0.0) and not chain[0].contains(x0, 0.0)
    res["H6"] = PropertyResult(h6, f"x_0={x0!r}")

    total = sum(diam)
    res["diameter_sum"] = PropertyResult(0 < total < 4 * chain[0].length,
                                         f"sum d_m={total!r} vs 4 delta0={4 * chain[0].length!r}")

    keys = sorted(k for k in tree.nodes if len(k) >= 1)
    step = max(1, len(keys) // max(recurrence_samples, 1))
    worst = max((recurrence_residual(tree, k) for k in keys[::step]), default=0.0)
    res["recurrence"] = PropertyResult(worst <= RECURRENCE_RTOL, f"max relative residual {worst!r}")
    return HReport(res)


def bracket_walk(tree: HomoclinicTree, x: float, levels: int | None = None,
                 max_index: int | None = None) -> list[tuple[int, float, float]]:
    """Index-selection walk: i_k with x_(i_1..i_k - 1) < x < x_(i_1..i_k).

    Values along the walk are computed on demand, so the walk is not
    limited to stored nodes.  Returns (i_k, lower, upper) per level.
    """
    levels = tree.realized_depth if levels is None else levels
    max_index = len(tree.sequences.get((), ())) * 4 if max_index is None else max_index
    prefix: Key = ()
    out = []
    target = (float(x), 0.0)
    for _ in range(levels):
        def val(i: int) -> tuple[float, float]:
            return tree.value(prefix + (i,))

        if not (_dd_less(val(0), target) and _dd_less(target, tree.limit(prefix))):
            break
        lo, hi = 0, 1
        while not _dd_less(target, val(hi)):
            lo, hi = hi, hi * 2
            if hi > max_index:
                return out
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if _dd_less(target, val(mid)):
                hi = mid
            else:
                lo = mid
        lower, upper = val(hi - 1), val(hi)
        if not _dd_less(lower, target):
            break  # x is itself a node
        out.append((hi, lower[0] + lower[1], upper[0] + upper[1]))
        prefix = prefix + (hi,)
    return out


def glued_lift(m: CentralMap, x: float, y: float, n: int, t: float,
               lambda_s: float = 0.25) -> tuple[float, float]:
    """Carry ``(x, y, 0)`` n steps and through the gluing.

    Returns the placeholder first coordinate ``lambda_s**n * x - 1/2`` and
    ``y' = F^n(y) + t - 1``.

    Raises:
        WindowViolated: ``F^n(y)`` is not inside ``(1 - t, 1)``.
    """
    if not (0.0 <= y <= t):
        raise WindowViolated(f"y={y} must lie in [0, t]")
    yn = m.iterate(y, n)
    if not (1 - t < yn < 1):
        raise WindowViolated(f"F^{n}(y)={yn!r} is not inside (1-t, 1)")
    return lambda_s ** n * x - 0.5, yn + t - 1

