"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class SNHCError(Exception):
    """Base class for all package errors."""


class InvalidSpec(SNHCError):
    """A map or family specification violates its own invariants."""


class SideConstraintViolated(InvalidSpec):
    """An eigenvalue lies outside the open interval a condition requires."""


class NonMonotoneBlend(SNHCError):
    """A blend piece failed the strict monotonicity check."""


class FixedPointCountMismatch(SNHCError):
    """The isolated fixed points disagree with the count the regime requires."""


class OutOfDomain(SNHCError):
    """An argument lies outside the domain of the operation."""


class OutOfRange(SNHCError):
    """A value lies outside the range of the map being inverted."""


class NoConvergence(SNHCError):
    """A root search exhausted its bracket without converging."""


class OrbitLeftDomain(SNHCError):
    """An orbit segment left the domain before the requested length.

    Attributes:
        step: Index of the first iterate that could not be computed.
    """

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class IterationBudgetExceeded(SNHCError):
    """An iterative search ran past its cap.

    Attributes:
        cap: The budget that was exhausted.
    """

    def __init__(self, message: str, cap: int):
        super().__init__(message)
        self.cap = cap


class InvariantViolated(SNHCError):
    """A certified invariant failed; the message names the inequality."""


class BranchResolutionFailure(SNHCError):
    """Two discontinuities could not be separated in binary64."""


class AtDiscontinuity(SNHCError):
    """The return map is bivalued at the requested point.

    Attributes:
        index: Branch index i of the discontinuity d_i.
    """

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


class ExpansionFloorViolated(SNHCError):
    """The return derivative dropped below the floor.

    Attributes:
        witness: Point where the minimum derivative was observed.
        value: The derivative there.
    """

    def __init__(self, message: str, witness: float, value: float):
        super().__init__(message)
        self.witness = witness
        self.value = value


class OutOfWindow(SNHCError):
    """A parameter lies outside the window where an estimate applies."""


class PreconditionFailed(SNHCError):
    """A standing hypothesis required by the operation does not hold."""


class NodeMissing(SNHCError):
    """A multi-index prefix is not present in the tree."""


class WindowViolated(SNHCError):
    """An iterate failed to land in the window required by a lift."""


class OutOfCube(SNHCError):
    """A point lies outside the cube where the product map is defined."""


class OutsideGlueWindow(SNHCError):
    """A point lies outside the window where the gluing translation acts."""


class CrossesDiscontinuity(SNHCError):
    """A strip basis straddles a discontinuity of the return map."""


class NotPerfect(SNHCError):
    """A successor strip is not contained in the interior of the plus domain."""


class AccumulationNeeded(SNHCError):
    """A finite chase landed on a domain endpoint; only an accumulation argument applies."""


class ResourceBudgetExceeded(SNHCError):
    """A box computation would exceed its memory or box budget."""


class ConfigError(SNHCError):
    """A scenario configuration is malformed."""
