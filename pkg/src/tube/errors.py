"""Exception taxonomy shared across the package."""


class TubeError(Exception):
    """Base class for all package-specific failures."""


class DataError(TubeError):
    """Malformed, inconsistent, or out-of-contract input data."""


class SchemaError(DataError):
    """Column layout does not match the declared schema."""


class ParseError(DataError):
    """A cell could not be parsed; message carries row and column."""


class ConfigError(TubeError):
    """Invalid or contradictory configuration."""


class DegenerateInputError(TubeError):
    """Input leaves a required quantity undefined (constant column, empty class)."""


class SingularDesignError(TubeError):
    """Design matrix numerically singular even after ridge stabilization."""


class AscentViolationError(TubeError):
    """An EM update decreased its objective beyond the allowed numerical slack."""


class BootstrapInstabilityError(TubeError):
    """Too many bootstrap replicates failed to produce estimates."""
