"""Exception hierarchy shared by every module."""


class FD2CLError(Exception):
    """Base class for all package errors."""


class DimensionError(FD2CLError, ValueError):
    pass


class EvaluationError(FD2CLError, ArithmeticError):
    """A value that must be finite was not."""


class ConfigError(FD2CLError, ValueError):
    pass


class StateError(FD2CLError, ValueError):
    """Continual-learning state is inconsistent (mismatched index sets, missing rows)."""


class DataError(FD2CLError, ValueError):
    pass


class ContractError(FD2CLError, ValueError):
    pass


class DegenerateFeatureError(FD2CLError, ValueError):
    pass


class FormatError(FD2CLError, ValueError):
    """On-disk file failed validation. ``offset`` is the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalAbort(FD2CLError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message, task=None, epoch=None, batch_index=None):
        super().__init__(message)
        self.task = task
        self.epoch = epoch
        self.batch_index = batch_index
