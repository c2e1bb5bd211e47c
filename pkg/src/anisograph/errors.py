"""Exception types raised by the pipeline stages."""


class AnisographError(Exception):
    """Base class; ``stage`` is filled in by the pipeline when re-raised."""

    stage = None

    def __init__(self, message="", **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class InfeasibleFamily(AnisographError):
    pass


class InvalidMu(AnisographError):
    pass


class DegenerateConvexity(AnisographError):
    pass


class NotElliptic(AnisographError):
    pass


class BlowUp(AnisographError):
    pass


class Stiffness(AnisographError):
    pass


class NegativeA(AnisographError):
    pass


class QuadratureFailure(AnisographError):
    pass


class NoEpsilon(AnisographError):
    pass


class OutOfChart(AnisographError):
    pass


class OnCone(AnisographError):
    pass


class ScanExhausted(AnisographError):
    pass


class SignViolation(AnisographError):
    pass


class OrderingViolation(AnisographError):
    pass


class GradientOutOfDomain(AnisographError):
    pass


class NoConvergence(AnisographError):
    pass


class Unstable(AnisographError):
    pass


class MissingUpstream(AnisographError):
    pass


class ConfigError(AnisographError):
    pass
