"""Exception taxonomy shared across the package.

The CLI maps these onto its exit codes: ConfigError -> 2, DataError and
ParseError -> 3, NumericError -> 4. VerificationError is reserved for the
gradient-check harness (exit 5).
"""


class SkwsError(Exception):
    """Base class for all library errors."""


class DimensionError(SkwsError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(SkwsError):
    """A documented precondition was violated by the caller."""


class StateError(SkwsError):
    """An object was used in an invalid lifecycle state (e.g. double backward)."""


class ConfigError(SkwsError):
    """Invalid or inconsistent configuration."""


class DataError(SkwsError):
    """Dataset content or layout problem."""


class ParseError(SkwsError):
    """A binary container (WAV file, weight file) could not be decoded."""


class NumericError(SkwsError):
    """Non-finite values were produced where finite ones are required."""


class VerificationError(SkwsError):
    """A self-verification check (gradient check) failed."""
