"""Exception hierarchy shared by every ESS module."""


class EssError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(EssError, ValueError):
    """Tensor shapes or vector widths do not agree."""


class ConfigurationError(EssError, ValueError):
    """An option, mode or hyperparameter is invalid."""


class ContractError(EssError, RuntimeError):
    """A call violated a documented precondition."""


class NumericError(EssError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required.

    ``trace`` carries the partial search trace or report when available.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class TokenIndexError(EssError, IndexError):
    """A token id lies outside the vocabulary."""


class DataError(EssError, ValueError):
    """A corpus or split is empty or unusable."""


class CorpusEncodingError(DataError):
    def __init__(self, path, line, reason):
        super().__init__(f"{path}:{line}: cannot decode line as UTF-8 ({reason})")
        self.path = path
        self.line = line


class ArchFileError(EssError, ValueError):
    """An architecture document is malformed; ``field`` names the offending location."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
