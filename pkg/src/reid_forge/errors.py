"""Exception types shared across the package."""


class ReidForgeError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(ReidForgeError):
    """A record or value violates a type invariant."""


class ManifestParseError(ReidForgeError):
    """A manifest file could not be parsed."""

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class SplitInfeasibleError(ReidForgeError):
    """A query/gallery split cannot satisfy the cross-camera constraint."""

    def __init__(self, identity_id: int, reason: str):
        super().__init__(f"identity {identity_id}: {reason}")
        self.identity_id = identity_id


class ConfigurationError(ReidForgeError):
    """A configuration value is inconsistent or unusable."""


class ShapeError(ReidForgeError):
    """Tensor arguments have incompatible shapes."""


class NumericError(ReidForgeError):
    """A computation produced non-finite values."""


class ContractError(ReidForgeError):
    """An operation was called outside its stated preconditions."""


class DegenerateWeightsError(ReidForgeError):
    """A pooling weight mask sums to zero."""


class ProtocolError(ReidForgeError):
    """The evaluation protocol's assumptions do not hold for the given data."""
