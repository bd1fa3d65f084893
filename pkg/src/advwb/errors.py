"""Exception hierarchy shared across the workbench."""


class WorkbenchError(Exception):
    """Base class for all errors raised by advwb."""


class ShapeError(WorkbenchError, ValueError):
    """Operand shapes are incompatible.

    ``axis`` names the offending axis when one can be singled out.
    """

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class GradientError(WorkbenchError, RuntimeError):
    """Backward pass could not run or produced non-finite values."""


class TrainingDiverged(WorkbenchError, RuntimeError):
    """Training loss became non-finite."""


class ContainerError(WorkbenchError, ValueError):
    """Base class for ATWB container failures."""


class CorruptHeaderError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    def __init__(self, message, entry=None):
        super().__init__(message)
        self.entry = entry


class DuplicateNameError(ContainerError):
    pass


class PGMFormatError(WorkbenchError, ValueError):
    pass
