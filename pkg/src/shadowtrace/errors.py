"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to: 2 for
precondition / stage-ordering failures, 70 for internal failures.
"""


class ShadowTraceError(Exception):
    exit_code = 70


class PreconditionError(ShadowTraceError):
    exit_code = 2


class FormatError(PreconditionError):
    pass


class DimensionMismatch(PreconditionError):
    pass


class ConstantImage(PreconditionError):
    pass


class InvalidSpec(PreconditionError):
    pass


class EmptyMask(PreconditionError):
    pass


class InsufficientData(PreconditionError):
    pass


class ShapeError(PreconditionError):
    pass


class ArchitectureMismatch(PreconditionError):
    pass


class EmptyManualMask(PreconditionError):
    pass


class DegenerateRange(PreconditionError):
    pass


class DegenerateVariance(PreconditionError):
    pass


class DegenerateDifferences(PreconditionError):
    pass


class NoViews(PreconditionError):
    pass


class MissingCheckpoint(PreconditionError):
    pass


class StageOrderError(PreconditionError):
    pass


class NonIntegralOutputExtent(PreconditionError):
    pass


class UnresolvedShape(PreconditionError):
    pass


class UnknownKey(PreconditionError):
    pass


class ConfigTypeError(PreconditionError):
    pass


class DivergedLoss(ShadowTraceError):
    """Raised when a training loss becomes non-finite."""

    def __init__(self, message, checkpoint_dir=None):
        super().__init__(message)
        self.checkpoint_dir = checkpoint_dir


class SolverFailure(ShadowTraceError):
    pass


class OutputExists(PreconditionError):
    pass
