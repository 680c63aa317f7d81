"""Exception hierarchy shared by all labelrand modules."""


class LabelRandError(Exception):
    """Base class for every error raised by labelrand."""


class InputDomainError(LabelRandError, ValueError):
    """An input value (label, prior, feature row, file content) is malformed."""


class ParameterError(LabelRandError, ValueError):
    """A configuration parameter is outside its allowed range."""


class EnumerationLimitError(ParameterError):
    """Brute-force enumeration was requested beyond the configured size cap."""


class PrivacyLedgerError(LabelRandError, RuntimeError):
    """A true label was requested a second time."""


class TrainingDivergenceError(LabelRandError, RuntimeError):
    """Training produced a non-finite loss or parameter."""
