"""Exception hierarchy shared by all solver modules."""


class NMGError(Exception):
    """Base class for every error raised by :mod:`nmg`."""


class NumericalError(NMGError):
    """A numerical procedure failed to reach its target (CLI exit code 3)."""


class DivergentOccupation(NumericalError, ValueError):
    """Bosonic occupation is infinite somewhere on the band."""


class QuadratureNotConverged(NumericalError):
    """Requested tolerance could not be met within the node / panel budget."""


class OnBandError(NMGError, ValueError):
    """A quantity only defined off the band was requested on the band."""


class StepTooLarge(NumericalError):
    """The time stepper produced a non-contractive propagator."""


class RootSearchInconclusive(NumericalError):
    """A sign change was bracketed but the root polish failed."""


class SingularU(NumericalError):
    """``u(t)`` is (numerically) singular where its inverse is required."""


class TruncationOverflow(NumericalError):
    """Bosonic Fock-space truncation is too small for the populated levels."""


class ConfigError(NMGError):
    """Run configuration violates the schema.

    Parameters
    ----------
    message : str
        Human readable description.
    pointer : str
        JSON pointer to the offending field ("" for the document root).
    """

    def __init__(self, message, pointer=""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer
        self.reason = message


class TaskError(NMGError):
    """Wraps a module error with the task that raised it."""

    def __init__(self, task, cause):
        super().__init__(f"task '{task}' failed: {cause}")
        self.task = task
        self.cause = cause
