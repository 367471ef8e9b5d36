"""Scaled fundamental domains and the iteration counters built on them.

For a parameter ``t`` the ladder holds the minus domain near the sink 1,
the plus domain near the neck (a backward image of the minus domain),
the chain of backward images of ``[F^{-1}(t), t]`` and the counters that
measure how long orbits need to cross between the two ends.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

from . import _kernels as kern
from .central_maps import DEFAULT_ENTRY_CAP, CentralMap, Regime
from .certify import INTERVAL_SLACK, DEFAULT_POLICY, Policy, less_equal, strictly_less
from .errors import InvariantViolated, IterationBudgetExceeded, OutOfWindow
from .interval import Interval

CHAIN_LENGTH = 5
RATIO_FLOOR = 0.9


class LadderRegime(str, enum.Enum):
    HYPERBOLIC = "HYPERBOLIC"
    SADDLE_NODE = "SADDLE_NODE"
    TWO_PARAM = "TWO_PARAM"
    POST_SN = "POST_SN"


class Check(str, enum.Enum):
    """How much of the ladder's invariant list ``build_ladder`` enforces."""

    NONE = "none"
    STRUCTURAL = "structural"  # containments, lengths, endpoint consistency
    ALL = "all"  # additionally the small-t estimates (9/10 ratios, eta bounds)


@dataclass(frozen=True)
class DomainLadder:
    """Domains and counters at one parameter point.

    Attributes:
        t: Scale parameter.
        s: Saddle-node parameter of the underlying map.
        regime: Ladder flavour; POST_SN for the saddle-node map with s > 0.
        d_minus: Domain next to the sink 1.
        d_plus: Backward image of ``d_minus`` next to the neck.
        k_t: Number of iterates carrying ``d_plus`` onto ``d_minus``.
        delta_chain: Backward images of ``[F^{-1}(t), t]``, i = 0..4.
        kappa_t: First k with the k-th image of chain element 0 inside [1-t, 1].
        alpha_t: Extra iterates until that image is inside [1-eta_t, 1].
        eta_t: Sum of the lengths of chain elements 0 and 1.
        tau: Offset t - sqrt(s) (POST_SN only).
        rho: Radius of the neighbourhood of the sink used by the gluing.
    """

    t: float
    s: float
    regime: LadderRegime
    d_minus: Interval
    d_plus: Interval
    k_t: int
    delta_chain: tuple[Interval, ...] = ()
    kappa_t: int | None = None
    alpha_t: int | None = None
    eta_t: float | None = None
    tau: float | None = None
    rho: float = 0.05
    notes: tuple[str, ...] = field(default=())

    @property
    def delta_lengths(self) -> list[float]:
        return [iv.length for iv in self.delta_chain]

    @property
    def delta_union(self) -> Interval:
        """Hull of the chain, i.e. the union of its adjacent intervals."""
        return Interval(self.delta_chain[-1].lo, self.delta_chain[0].hi)

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "s": self.s,
            "regime": self.regime.value,
            "d_minus": self.d_minus.to_list(),
            "d_plus": self.d_plus.to_list(),
            "k_t": self.k_t,
            "delta_chain": [iv.to_list() for iv in self.delta_chain],
            "kappa_t": self.kappa_t,
            "alpha_t": self.alpha_t,
            "eta_t": self.eta_t,
            "tau": self.tau,
            "rho": self.rho,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainLadder":
        return cls(
            t=d["t"], s=d["s"], regime=LadderRegime(d["regime"]),
            d_minus=Interval(*d["d_minus"]), d_plus=Interval(*d["d_plus"]), k_t=d["k_t"],
            delta_chain=tuple(Interval(*iv) for iv in d["delta_chain"]),
            kappa_t=d["kappa_t"], alpha_t=d["alpha_t"], eta_t=d["eta_t"], tau=d["tau"],
            rho=d.get("rho", 0.05),
        )


def ladder_regime(m: CentralMap) -> LadderRegime:
    reg = m.spec.regime
    if reg is Regime.HYPERBOLIC:
        return LadderRegime.HYPERBOLIC
    if reg is Regime.TWO_PARAM:
        return LadderRegime.TWO_PARAM
    return LadderRegime.POST_SN if m.spec.s > 0 else LadderRegime.SADDLE_NODE


def _backward_until(m: CentralMap, x: float, bound: float, cap: int) -> tuple[int, float]:
    """Least k >= 0 with F^{-k}(x) <= bound, and that iterate."""
    n, v = kern.first_entry(*m.arrays, float(x), -math.inf, float(bound), -1, int(cap))
    if n < 0:
        raise IterationBudgetExceeded(
            f"backward orbit of {x!r} does not reach {bound!r} within {cap}", cap=cap)
    return int(n), float(v)


def _forward_until(m: CentralMap, x: float, bound: float, cap: int) -> tuple[int, float]:
    """Least k >= 0 with F^k(x) >= bound, and that iterate."""
    n, v = kern.first_entry(*m.arrays, float(x), float(bound), math.inf, 1, int(cap))
    if n < 0:
        raise IterationBudgetExceeded(
            f"forward orbit of {x!r} does not reach {bound!r} within {cap}", cap=cap)
    return int(n), float(v)


def _chain(m: CentralMap, t: float) -> tuple[Interval, ...]:
    hi = t
    lo = m.inverse(t)
    out = [Interval(lo, hi)]
    for _ in range(CHAIN_LENGTH - 1):
        hi, lo = lo, m.inverse(lo)
        out.append(Interval(lo, hi))
    return tuple(out)


def build_ladder(m: CentralMap, t: float, s: float | None = None, *,
                 cap: int = DEFAULT_ENTRY_CAP, check: Check | str = Check.STRUCTURAL,
                 rho: float | None = None, policy: Policy = DEFAULT_POLICY) -> DomainLadder:
    """Compute the domains and counters at scale ``t``.

    Args:
        m: Central map.
        t: Scale parameter, small and positive.
        s: Must equal the map's own saddle-node parameter when given.
        cap: Iteration budget for every counter.
        check: Invariant enforcement level.
        rho: Gluing radius; defaults to half the map's delta.
        policy: Numeric policy for the margin checks.

    Raises:
        IterationBudgetExceeded: A counter did not resolve under ``cap``.
        InvariantViolated: A checked invariant failed; the message names it.
        OutOfWindow: The parameters are outside the regime's window.
    """
    t = float(t)
    check = Check(check)
    if s is not None and float(s) != m.spec.s:
        raise InvariantViolated(f"s={s} does not match the map's s={m.spec.s}")
    s = m.spec.s
    if not t > 0:
        raise OutOfWindow("t must be positive")
    lam = m.spec.lam
    regime = ladder_regime(m)
    rho = m.spec.delta / 2 if rho is None else rho
    tau = None
    if regime is LadderRegime.TWO_PARAM:
        if s >= 0:
            raise OutOfWindow("the two-parameter ladder needs s < 0")
        if 3 * t >= m.spec.delta:
            raise OutOfWindow("3t must stay inside the affine zone around 1")
        d_minus = Interval(1 - 3 * t, 1 - 3 * lam * t)
        target = m.eval(-t)
        k, lo = _backward_until(m, d_minus.lo, target, cap)
        hi = m.iterate(d_minus.hi, -k)
        d_plus = Interval(lo, hi)
    else:
        if regime is LadderRegime.POST_SN:
            root = math.sqrt(s)
            if t <= root:
                raise OutOfWindow(f"t={t} must exceed sqrt(s)={root}")
            tau = t - root
            depth = tau
        else:
            if regime is LadderRegime.SADDLE_NODE and s < 0:
                raise OutOfWindow("the saddle-node ladder is defined for s >= 0")
            depth = t
        if depth >= m.spec.delta:
            raise OutOfWindow("the minus domain must lie in the affine zone around 1")
        d_minus = Interval(1 - depth, 1 - lam * depth)
        k, hi = _backward_until(m, d_minus.hi, t, cap)
        lo = m.iterate(d_minus.lo, -k)
        d_plus = Interval(lo, hi)

    chain: tuple[Interval, ...] = ()
    kappa = alpha = None
    eta = None
    if regime is not LadderRegime.TWO_PARAM:
        chain = _chain(m, t)
        eta = chain[0].length + chain[1].length
        kappa, _ = _forward_until(m, chain[0].lo, 1 - t, cap)
        a_steps, _ = _forward_until(m, m.iterate(chain[0].lo, kappa), 1 - eta, cap)
        alpha = a_steps

    ladder = DomainLadder(t=t, s=s, regime=regime, d_minus=d_minus, d_plus=d_plus, k_t=k,
                          delta_chain=chain, kappa_t=kappa, alpha_t=alpha, eta_t=eta,
                          tau=tau, rho=rho)
    if check is not Check.NONE:
        failures = structural_failures(m, ladder, policy)
        if check is Check.ALL:
            failures += small_t_failures(ladder, policy)
        if failures:
            raise InvariantViolated("; ".join(failures))
    return ladder


def structural_failures(m: CentralMap, ld: DomainLadder,
                        policy: Policy = DEFAULT_POLICY) -> list[str]:
    """Names of the violated structural invariants (empty when all hold)."""
    out = []
    t, lam, s = ld.t, m.spec.lam, ld.s
    a, b = ld.d_plus
    img_a = m.iterate(a, ld.k_t)
    img_b = m.iterate(b, ld.k_t)
    if abs(img_a - ld.d_minus.lo) > 1e-9 * t or abs(img_b - ld.d_minus.hi) > 1e-9 * t:
        out.append("endpoint consistency F^k(D+) = D-")
    if ld.regime is LadderRegime.HYPERBOLIC:
        if not (strictly_less(t / m.spec.beta ** 2, a, policy) and b <= t + INTERVAL_SLACK):
            out.append("D+ inside (beta^-2 t, t]")
        if abs(ld.d_minus.length - t * (1 - lam)) > 1e-12:
            out.append("|D-| = t(1-lambda)")
    elif ld.regime is LadderRegime.SADDLE_NODE:
        if not (a >= -INTERVAL_SLACK and b <= t + INTERVAL_SLACK):
            out.append("D+ inside [0, t]")
        if not less_equal(ld.d_plus.length, t * t, policy):
            out.append("|D+| <= t^2")
    elif ld.regime is LadderRegime.POST_SN:
        root = math.sqrt(s)
        if not (a >= root - INTERVAL_SLACK and b <= root + ld.tau + INTERVAL_SLACK):
            out.append("D+ inside [sqrt(s), sqrt(s)+tau]")
    else:
        target = m.eval(-t)
        if not ld.d_plus.contains(target, 0.0):
            out.append("Psi(-t) in D+")
        if not less_equal(ld.d_plus.length, t * t + abs(s), policy):
            out.append("|D+| <= t^2 + |s|")
        if not strictly_less(t * t / 2, ld.d_plus.length, policy):
            out.append("|D+| > t^2/2")
    if ld.delta_chain:
        for i in range(1, len(ld.delta_chain)):
            prev, cur = ld.delta_chain[i - 1], ld.delta_chain[i]
            if abs(m.inverse(prev.lo) - cur.lo) > 1e-10 or abs(prev.lo - cur.hi) > 1e-10:
                out.append(f"chain element {i} is the backward image of element {i - 1}")
    return out


def small_t_failures(ld: DomainLadder, policy: Policy = DEFAULT_POLICY) -> list[str]:
    """Estimates that hold only for small t (9/10 ratios and eta bounds)."""
    out = []
    if ld.delta_chain:
        rep = check_length_ratios(ld)
        if not rep.passed:
            out.append(f"9/10 length ratio fails at i={rep.failing}")
        if ld.regime is LadderRegime.SADDLE_NODE:
            t2 = ld.t * ld.t
            if not (strictly_less(t2, ld.eta_t, policy) and strictly_less(ld.eta_t, 2 * t2, policy)):
                out.append("t^2 < eta_t < 2t^2")
    return out


@dataclass(frozen=True)
class RatioReport:
    """Outcome of the length-ratio check on the chain.

    Attributes:
        ratios: delta^i / delta^0 for i = 1..4.
        upper_margins: 1 - ratio (must be >= 0).
        lower_margins: ratio - 0.9 (must be >= 0).
        sum_margins: (sum - 4 delta^0, 5 delta^0 - sum), both >= 0 on success.
        failing: Indices whose ratio leaves [0.9, 1].
        passed: Overall verdict.
    """

    ratios: tuple[float, ...]
    upper_margins: tuple[float, ...]
    lower_margins: tuple[float, ...]
    sum_margins: tuple[float, float]
    failing: tuple[int, ...]
    passed: bool


def check_length_ratios(ld: DomainLadder) -> RatioReport:
    """Verify delta^0 >= delta^i >= 0.9 delta^0 and 4 delta^0 <= sum <= 5 delta^0."""
    lens = ld.delta_lengths
    d0 = lens[0]
    ratios = tuple(li / d0 for li in lens[1:])
    upper = tuple(1.0 - r for r in ratios)
    lower = tuple(r - RATIO_FLOOR for r in ratios)
    total = sum(lens)
    sums = (total - 4 * d0, 5 * d0 - total)
    failing = tuple(i + 1 for i, (u, l) in enumerate(zip(upper, lower)) if u < 0 or l < 0)
    passed = not failing and sums[0] >= 0 and sums[1] >= 0
    return RatioReport(ratios, upper, lower, sums, failing, passed)


def lambda_alpha_bound(ld: DomainLadder, lam: float, alpha: int | None = None,
                       policy: Policy = DEFAULT_POLICY) -> tuple[float, float, bool]:
    """Compare lambda^alpha_t with 2t/lambda.

    Args:
        ld: Saddle-node ladder.
        lam: Eigenvalue at the sink.
        alpha: Override for alpha_t (used to sanity-check the checker).
    """
    a = ld.alpha_t if alpha is None else alpha
    lhs = lam ** a
    rhs = 2 * ld.t / lam
    return lhs, rhs, less_equal(lhs, rhs, policy)
