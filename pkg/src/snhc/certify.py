"""Margin-aware comparisons used by every certificate.

Certificates compare two binary64 numbers.  A strict inequality ``lhs < rhs``
is accepted only with a relative margin, and the optional directed mode
nudges both sides outward by one ulp per operand before comparing, so a
pass survives the worst rounding of the final operation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

REL_MARGIN = 1e-9
INTERVAL_SLACK = 1e-12


@dataclass(frozen=True)
class Policy:
    """Numeric policy for certificate checks.

    Attributes:
        rel_margin: Relative margin demanded by strict inequalities.
        directed: Re-check with outward rounding of both operands.
    """

    rel_margin: float = REL_MARGIN
    directed: bool = False


DEFAULT_POLICY = Policy()


def round_up(x: float, directed: bool = True) -> float:
    return math.nextafter(x, math.inf) if directed else x


def round_down(x: float, directed: bool = True) -> float:
    return math.nextafter(x, -math.inf) if directed else x


def strictly_less(lhs: float, rhs: float, policy: Policy = DEFAULT_POLICY) -> bool:
    """``lhs < rhs`` with the policy's relative margin."""
    if not (math.isfinite(lhs) and math.isfinite(rhs)):
        return False
    lo = round_up(lhs, policy.directed)
    hi = round_down(rhs, policy.directed)
    scale = max(abs(lhs), abs(rhs))
    return hi - lo > policy.rel_margin * scale


def less_equal(lhs: float, rhs: float, policy: Policy = DEFAULT_POLICY) -> bool:
    """``lhs <= rhs`` allowing the relative margin as tolerance."""
    if not (math.isfinite(lhs) and math.isfinite(rhs)):
        return False
    lo = round_up(lhs, policy.directed)
    hi = round_down(rhs, policy.directed)
    scale = max(abs(lhs), abs(rhs))
    return lo - hi <= policy.rel_margin * scale


def in_closed(x: float, lo: float, hi: float, slack: float = INTERVAL_SLACK) -> bool:
    """Closed-interval membership with absolute slack."""
    return lo - slack <= x <= hi + slack


def subset(inner: tuple[float, float], outer: tuple[float, float],
           slack: float = INTERVAL_SLACK) -> bool:
    return outer[0] - slack <= inner[0] and inner[1] <= outer[1] + slack
