"""Exception types raised across the package."""


class AdlocusError(Exception):
    """Base class for all package errors."""


class ShapeError(AdlocusError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class ConfigError(AdlocusError, ValueError):
    """A configuration object violates its invariants."""


class ContractError(AdlocusError, ValueError):
    """Input values violate a precondition (e.g. non-binary mask)."""


class FormatError(AdlocusError, ValueError):
    """A weights file is malformed."""


class ManifestError(AdlocusError, ValueError):
    """A dataset manifest is empty, duplicated or points at missing files."""


class TrainingError(AdlocusError, RuntimeError):
    """Training diverged (non-finite loss)."""
