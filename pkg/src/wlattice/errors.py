"""Exception hierarchy for the lattice whisker toolkit."""


class WLError(Exception):
    """Base class for every error raised by this package."""


class NoValidNormalization(WLError):
    pass


class EmptyExcitedSet(WLError):
    pass


class OrderMismatch(WLError):
    pass


class OutOfDomain(WLError):
    pass


class TruncationOverflow(WLError):
    pass


class BlowUp(WLError):
    pass


class SmallDivisor(WLError):
    def __init__(self, min_divisor, floor):
        super().__init__(f"small divisor {min_divisor:.3e} below floor {floor:.1e}")
        self.min_divisor = min_divisor
        self.floor = floor


class NoConvergence(WLError):
    def __init__(self, message, iterations=0, residual_history=()):
        super().__init__(message)
        self.iterations = iterations
        self.residual_history = list(residual_history)


class SplittingDivergence(WLError):
    pass


class RateCertificationFailed(WLError):
    pass


class ResonanceDetected(WLError):
    def __init__(self, order, overlaps):
        super().__init__(f"resonance at order {order}: {overlaps}")
        self.order = order
        self.overlaps = overlaps


class SeriesDiverging(WLError):
    pass


class ContractionFailure(WLError):
    def __init__(self, factor):
        super().__init__(f"tail map is not a contraction (factor {factor:.3g})")
        self.factor = factor


class BallEscape(WLError):
    pass


class SingularFactor(WLError):
    pass


class NotInvertible(WLError):
    pass


class ConfigError(WLError):
    pass
