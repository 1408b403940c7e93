"""Exception hierarchy shared by all modules."""


class SlowDecayError(Exception):
    """Base class for every error raised by this package."""


# operator algebra
class SupportOutOfLattice(SlowDecayError, ValueError):
    pass


class DimensionOverflow(SlowDecayError, MemoryError):
    pass


class DimensionMismatch(SlowDecayError, ValueError):
    pass


class ConvergenceFailure(SlowDecayError, RuntimeError):
    pass


class NotCharged(SlowDecayError, ValueError):
    """Operator does not commute with the charge; use the dense path."""


# lattice models
class UnknownFamily(SlowDecayError, ValueError):
    pass


class NonAdjacentBond(SlowDecayError, ValueError):
    pass


class PeriodicFermionUnsupported(SlowDecayError, ValueError):
    pass


class UnsupportedLattice(SlowDecayError, ValueError):
    pass


# states
class NotARing(SlowDecayError, ValueError):
    pass


class BondVarianceExceeded(SlowDecayError, ValueError):
    pass


# dynamics
class HorizonNonpositive(SlowDecayError, ValueError):
    pass


class HorizonExceeded(SlowDecayError, ValueError):
    pass


# correlators
class IncompleteGrid(SlowDecayError, ValueError):
    pass


class TailTooHeavy(SlowDecayError, ValueError):
    pass


class InsufficientData(SlowDecayError, ValueError):
    pass


class ConfigError(SlowDecayError, ValueError):
    """Invalid experiment configuration; ``violations`` lists every problem."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))
