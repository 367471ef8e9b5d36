"""Closed real intervals with endpoint arithmetic."""

from __future__ import annotations

from typing import NamedTuple

from .certify import INTERVAL_SLACK


class Interval(NamedTuple):
    lo: float
    hi: float

    @property
    def length(self) -> float:
        return self.hi - self.lo

    @property
    def mid(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def contains(self, x: float, slack: float = INTERVAL_SLACK) -> bool:
        return self.lo - slack <= x <= self.hi + slack

    def interior_contains(self, x: float) -> bool:
        return self.lo < x < self.hi

    def subset_of(self, other: "Interval", slack: float = INTERVAL_SLACK) -> bool:
        return other.lo - slack <= self.lo and self.hi <= other.hi + slack

    def to_list(self) -> list[float]:
        return [float(self.lo), float(self.hi)]
