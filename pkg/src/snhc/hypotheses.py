"""Closed-form and sampled checks of the standing quantitative conditions.

Every check returns a :class:`HypothesisReport` oriented so that the
condition holds exactly when ``margin = rhs - lhs`` is positive.  Reports
carry the inputs they were computed from, so a report can be re-derived
and compared by anyone holding it.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .central_maps import CentralMap, Regime
from .domains import DomainLadder, LadderRegime
from .errors import OutOfWindow, PreconditionFailed, SideConstraintViolated

T1_GRID = 1000
CONTRACTION_GRID = 64  # points per chain element
HALF = 0.5


class Condition(str, enum.Enum):
    T1 = "T1"
    T2 = "T2"
    T3 = "T3"
    SN = "SN"
    DS = "DS"
    EXP_BUDGET = "EXP_BUDGET"
    L_HALF = "L_HALF"


@dataclass(frozen=True)
class HypothesisReport:
    """One verdict with the numbers behind it.

    Attributes:
        condition: Which condition was checked.
        inputs: The exact parameter values used.
        lhs: Quantity that must stay below ``rhs``.
        rhs: Threshold.
        margin: ``rhs - lhs``.
        passed: ``margin > 0``.
        extras: Secondary numbers (analytic bounds, grid sizes).
    """

    condition: Condition
    inputs: dict
    lhs: float
    rhs: float
    margin: float
    passed: bool
    extras: dict = field(default_factory=dict)

    @classmethod
    def make(cls, condition: Condition, inputs: dict, lhs: float, rhs: float,
             **extras) -> "HypothesisReport":
        lhs = float(lhs)
        rhs = float(rhs)
        margin = rhs - lhs
        return cls(condition, dict(inputs), lhs, rhs, margin, bool(margin > 0), extras)

    def recheck(self) -> bool:
        """Recompute the verdict from ``lhs`` and ``rhs``."""
        return (self.rhs - self.lhs) > 0

    def to_dict(self) -> dict:
        return {
            "condition": self.condition.value,
            "inputs": self.inputs,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "margin": self.margin,
            "pass": self.passed,
            "extras": self.extras,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "HypothesisReport":
        return cls(Condition(d["condition"]), dict(d["inputs"]), d["lhs"], d["rhs"],
                   d["margin"], d["pass"], dict(d.get("extras", {})))


CSV_COLUMNS = ("condition", "inputs", "lhs", "rhs", "margin", "pass")


def reports_csv(reports: Iterable[HypothesisReport]) -> str:
    """Roll-up table, one row per report, with inputs as sorted JSON."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow([r.condition.value, json.dumps(r.inputs, sort_keys=True),
                    repr(r.lhs), repr(r.rhs), repr(r.margin), str(r.passed).lower()])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# hyperbolic conditions
# ---------------------------------------------------------------------------

def t1_threshold(lam: float, beta: float) -> float:
    return 0.5 * (1 - lam) / (1 - 1 / beta)


def t3_ell(lam: float, beta: float) -> float:
    """Expansion constant (1 - lam) lam / (2 (1 - 1/beta) beta)."""
    return (1 - lam) * lam / (2 * (1 - 1 / beta) * beta)


def check_T123(m: CentralMap, ladder: DomainLadder | None = None) -> list[HypothesisReport]:
    """Check the three conditions of the hyperbolic model.

    T1 samples F' on 10^3 points of the plus domain of ``ladder``; without
    a ladder it is skipped.

    Raises:
        PreconditionFailed: The map is not hyperbolic.
    """
    if m.spec.regime is not Regime.HYPERBOLIC:
        raise PreconditionFailed("check_T123 needs a hyperbolic map")
    lam, beta = m.spec.lam, m.spec.beta
    out = []
    if ladder is not None:
        xs = np.linspace(ladder.d_plus.lo, ladder.d_plus.hi, T1_GRID)
        dmin = float(np.min(m.deriv_many(xs)))
        # oriented so that F' >= threshold is margin >= 0; equality counts as failure
        out.append(HypothesisReport.make(
            Condition.T1, {"lambda": lam, "beta": beta, "t": ladder.t},
            t1_threshold(lam, beta), dmin, grid=T1_GRID))
    out.append(HypothesisReport.make(Condition.T2, {"lambda": lam, "beta": beta},
                                     1 - lam, 1 / beta))
    ell = t3_ell(lam, beta)
    out.append(HypothesisReport.make(Condition.T3, {"lambda": lam, "beta": beta}, 1.0, ell,
                                     ell=ell))
    return out


# ---------------------------------------------------------------------------
# saddle-node conditions
# ---------------------------------------------------------------------------

def _require_open(name: str, v: float, lo: float, hi: float) -> None:
    if not (lo < v < hi):
        raise SideConstraintViolated(f"{name}={v} must lie in ({lo}, {hi})")


def sn_term(lam: float, K: float) -> float:
    return 4 * math.exp(K) * (1 - lam) / lam ** 6


def check_SN(lam: float, K: float) -> HypothesisReport:
    """4 e^K (1 - lam) / lam^6 < 1/2."""
    _require_open("lambda", lam, 2 / 3, 1.0)
    return HypothesisReport.make(Condition.SN, {"lambda": lam, "K": K}, sn_term(lam, K), HALF)


def check_DS(lam: float, beta: float, K: float) -> HypothesisReport:
    """Both the sink term and its mirror 4 e^K (1 - 1/beta) beta^6 stay below 1/2."""
    _require_open("lambda", lam, 2 / 3, 1.0)
    _require_open("beta", beta, 1.0, 1.5)
    lam_term = sn_term(lam, K)
    beta_term = 4 * math.exp(K) * (1 - 1 / beta) * beta ** 6
    return HypothesisReport.make(Condition.DS, {"lambda": lam, "beta": beta, "K": K},
                                 max(lam_term, beta_term), HALF,
                                 lambda_term=lam_term, beta_term=beta_term)


def expansion_lower_bound(lam: float, s: float, tau: float) -> float:
    """Lower bound (1 - lam) / (2 sqrt(s) + tau) for |D-| / |D+| past the bifurcation."""
    return (1 - lam) / (2 * math.sqrt(s) + tau)


def check_expansion_budget(m: CentralMap, t: float, s: float | None = None,
                           ladder: DomainLadder | None = None) -> HypothesisReport:
    """Check ell(t, s) e^{-K} > 2 with the closed-form lower bound for ell.

    Args:
        m: Saddle-node map with s > 0.
        t: Scale; must exceed sqrt(s).
        s: Optional echo of the map's parameter.
        ladder: When given, the measured ratio |D-|/|D+| is reported as well.

    Raises:
        OutOfWindow: ``t <= sqrt(s)`` or s is not positive.
    """
    s = m.spec.s if s is None else float(s)
    if m.spec.regime is not Regime.SADDLE_NODE or not s > 0:
        raise OutOfWindow("the expansion budget needs the saddle-node map with s > 0")
    root = math.sqrt(s)
    if not t > root:
        raise OutOfWindow(f"t={t} must exceed sqrt(s)={root}")
    tau = t - root
    lam, K = m.spec.lam, m.distortion_K
    ell = expansion_lower_bound(lam, s, tau)
    extras = {"ell_lower_bound": ell}
    if ladder is not None:
        extras["measured_ratio"] = ladder.d_minus.length / ladder.d_plus.length
    return HypothesisReport.make(Condition.EXP_BUDGET,
                                 {"lambda": lam, "K": K, "t": t, "s": s, "tau": tau},
                                 2.0, ell * math.exp(-K), **extras)


def contraction_analytic_bound(lam: float, K: float, t: float, alpha: int) -> float:
    return (2 * t + 1) ** 4 * math.exp(K) * (1 - lam) / (lam * t) * lam ** alpha / lam ** 4


def contraction_L(m: CentralMap, ladder: DomainLadder, j: int = 0,
                  grid: int = CONTRACTION_GRID) -> HypothesisReport:
    """Largest derivative of F^(kappa + alpha + j) over the chain union.

    Raises:
        PreconditionFailed: Not a saddle-node ladder, or (SN) fails for this map.
    """
    if ladder.regime is not LadderRegime.SADDLE_NODE:
        raise PreconditionFailed("contraction_L needs a saddle-node ladder")
    lam, K = m.spec.lam, m.distortion_K
    sn = check_SN(lam, K)
    if not sn.passed:
        raise PreconditionFailed(f"(SN) fails: lhs={sn.lhs}")
    n = ladder.kappa_t + ladder.alpha_t + j
    xs = np.concatenate([np.linspace(iv.lo, iv.hi, grid) for iv in ladder.delta_chain])
    _, ders = m.iterate_with_deriv_many(xs, n)
    lhs = float(np.max(ders))
    bound = contraction_analytic_bound(lam, K, ladder.t, ladder.alpha_t)
    return HypothesisReport.make(Condition.L_HALF,
                                 {"lambda": lam, "K": K, "t": ladder.t, "j": j,
                                  "kappa_t": ladder.kappa_t, "alpha_t": ladder.alpha_t},
                                 lhs, HALF, analytic_bound=bound, sn_lhs=sn.lhs)


def all_reports(m: CentralMap, ladder: DomainLadder | None = None) -> list[HypothesisReport]:
    """Every condition that applies to the map's regime."""
    reg = m.spec.regime
    K = m.distortion_K
    if reg is Regime.HYPERBOLIC:
        return check_T123(m, ladder)
    out: list[HypothesisReport] = []
    lam = m.spec.lam
    if reg is Regime.TWO_PARAM:
        if 2 / 3 < lam < 1 and 1 < m.spec.beta < 1.5:
            out.append(check_DS(lam, m.spec.beta, K))
        return out
    if 2 / 3 < lam < 1:
        out.append(check_SN(lam, K))
    if ladder is not None and ladder.regime is LadderRegime.POST_SN:
        out.append(check_expansion_budget(m, ladder.t, ladder=ladder))
    elif ladder is not None and ladder.regime is LadderRegime.SADDLE_NODE and out and out[0].passed:
        out.append(contraction_L(m, ladder))
    return out


def passing_budget_window(m: CentralMap, s_values: Sequence[float],
                          tau_values: Sequence[float]) -> list[tuple[float, float, bool]]:
    """Scan (s, tau) pairs for the expansion budget; used to locate its passing region."""
    rows = []
    lam, K = m.spec.lam, m.distortion_K
    for s in s_values:
        for tau in tau_values:
            rhs = expansion_lower_bound(lam, s, tau) * math.exp(-K)
            rows.append((float(s), float(tau), rhs > 2.0))
    return rows
