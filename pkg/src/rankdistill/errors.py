"""Exception types shared across the package.

Everything that signals a violated precondition derives from
``ContractError`` so callers (and the CLI) can map the whole family to a
single failure class.
"""


class ContractError(Exception):
    """A caller violated a documented precondition."""


class DimensionError(ContractError):
    """Array shapes are incompatible with the requested operation."""


class NumericError(ContractError):
    """A value is NaN/Inf or outside the numeric domain of an operation."""


class ParameterError(ContractError):
    """A scalar argument is outside its legal range."""


class VocabularyError(ContractError):
    """A token id falls outside the configured vocabulary."""


class SequenceLengthError(ContractError):
    """A token sequence exceeds the configured maximum length."""


class ConfigError(ContractError):
    """A configuration value or combination is invalid."""


class TaskSpecError(ConfigError):
    """A synthetic-task specification cannot be realized."""
