"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: config errors to 2, data errors to 3,
numeric failures to 4.
"""


class SessRecError(Exception):
    """Base class for all package errors."""


class ConfigError(SessRecError, ValueError):
    """Invalid hyperparameter or option combination."""


class DimensionError(SessRecError, ValueError):
    """Tensor shapes do not agree."""


class ItemIndexError(SessRecError, IndexError):
    """An item or class index lies outside its valid range."""


class ContractError(SessRecError, ValueError):
    """A caller violated a documented precondition."""


class NumericError(SessRecError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class DataError(SessRecError):
    """Base class for problems with input data."""


class ParseError(DataError, ValueError):
    """Malformed input file."""


class EmptyCorpusError(DataError, ValueError):
    """Filtering removed every session."""


class SplitError(DataError, ValueError):
    """The corpus is too small for the requested split."""


class ChecksumError(DataError, ValueError):
    """A checkpoint does not belong to the given corpus, or a file is corrupt."""
