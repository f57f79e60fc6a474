"""Exception types shared across the toolkit."""


class FacebenchError(Exception):
    """Base class for all toolkit errors."""


class ManifestParseError(FacebenchError):
    """A manifest line could not be parsed; message names the line number."""


class IntegrityError(FacebenchError):
    """A manifest violates a structural invariant (e.g. duplicate image_id)."""


class FormatError(FacebenchError):
    """A binary artifact has a bad header, wrong size, or invalid payload."""


class ContractViolation(FacebenchError):
    """A documented precondition of an operation was not met by the caller."""


class DegenerateInput(FacebenchError):
    """Statistically unusable input (zero variance, empty distribution, ...)."""
