"""Exception types shared across the package.

Each class maps onto one CLI exit code (see ``knnsid.cli``).
"""


class KnnSidError(Exception):
    """Base class for every error raised deliberately by this package."""


class ContractError(KnnSidError, ValueError):
    """A caller broke a documented precondition."""


class DimensionError(ContractError):
    """Array shapes do not line up."""


class DegenerateVectorError(ContractError):
    """A zero-norm vector reached a cosine computation."""


class NumericError(KnnSidError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ConfigError(KnnSidError, ValueError):
    """Invalid or mismatched configuration."""


class DatasetError(KnnSidError):
    """The manifest or corpus cannot support the requested operation."""


class FormatError(KnnSidError, IOError):
    """A binary artifact could not be decoded."""


class MagicMismatchError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass
