"""Exception hierarchy shared by every module."""


class PFBRError(Exception):
    """Base class for all package errors."""


class NonFiniteError(PFBRError, ArithmeticError):
    """A NaN or Inf showed up in a computation."""


class ShapeMismatchError(PFBRError, ValueError):
    pass


class DimMismatchError(ShapeMismatchError):
    pass


class UnsupportedNestingError(PFBRError):
    pass


class EmptyEnsembleError(PFBRError, ValueError):
    pass


class EmptyBatchError(PFBRError, ValueError):
    pass


class NonSPDError(PFBRError, ValueError):
    pass


class BadLabelError(PFBRError, ValueError):
    pass


class DimTooSmallError(PFBRError, ValueError):
    pass


class ModelError(PFBRError):
    pass


class BadSplitIndexError(PFBRError, IndexError):
    pass


class DegenerateWeightsError(PFBRError):
    pass


class ConfigError(PFBRError, ValueError):
    pass


class ParseError(PFBRError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class NoOracleError(PFBRError):
    pass


class IoError(PFBRError, OSError):
    """Unreadable, unwritable or corrupt file."""


class FormatVersionMismatchError(PFBRError):
    pass


class TrainingDivergedError(NonFiniteError):
    def __init__(self, message, iteration, checkpoint_path=None):
        super().__init__(message)
        self.iteration = iteration
        self.checkpoint_path = checkpoint_path
