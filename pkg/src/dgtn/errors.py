"""Exception types raised by the dgtn package."""


class DgtnError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(DgtnError):
    pass


class ZeroDegree(DgtnError):
    def __init__(self, row: int):
        super().__init__(f"row {row} has zero degree and self-loop injection is disabled")
        self.row = row


class Singular(DgtnError):
    pass


class NonFinite(DgtnError):
    pass


class ParseError(DgtnError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class NonContiguousIndex(DgtnError):
    pass


class UnknownResidue(DgtnError):
    pass


class WtMismatch(DgtnError):
    def __init__(self, position: int, expected: str, found: str):
        super().__init__(
            f"wild-type letter {found!r} at position {position} does not match structure ({expected!r})"
        )
        self.position = position


class DegenerateEdge(DgtnError):
    pass


class ClashResampleExceeded(DgtnError):
    pass


class MissingParam(DgtnError):
    def __init__(self, name: str):
        super().__init__(f"parameter {name!r} not found in registry")
        self.name = name


class EmptyNeighborhood(DgtnError):
    pass


class NonStochasticOverride(DgtnError):
    pass


class AllBelowThreshold(DgtnError):
    pass


class DegenerateResidual(DgtnError):
    pass


class BoundViolated(DgtnError):
    pass


class PositionOutOfRange(DgtnError):
    pass


class LengthMismatch(DgtnError):
    pass


class EmptyBatch(DgtnError):
    pass


class EmptyDataset(DgtnError):
    pass


class InvalidConfig(DgtnError):
    pass


class IoError(DgtnError):
    pass
