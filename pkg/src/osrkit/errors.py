"""Exception taxonomy shared across the toolkit.

Every raised condition maps to one of these classes so the CLI can translate
failures into a stable exit-code scheme (usage=2, config=3, data=4, numeric=5).
"""


class OsrkitError(Exception):
    """Base class for all toolkit errors."""


class ParameterError(OsrkitError):
    """A scalar argument is outside its documented domain."""


class ShapeError(OsrkitError):
    """An array has the wrong shape, dtype, or axis layout."""


class GeometryError(OsrkitError):
    """Image geometry cannot support the requested operation."""


class ValidationError(OsrkitError):
    """A structured value violates its invariants (mask not binary, probs off the simplex, ...)."""


class PairingError(OsrkitError):
    """No admissible target/background pairing exists for a batch."""


class PartitionError(OsrkitError):
    """A spatial partition is degenerate (all foreground or all background)."""


class CapabilityError(OsrkitError):
    """The supplied model object cannot perform the requested operation."""


class ConfigError(OsrkitError):
    """A configuration file or override is malformed or contains unknown keys."""


class DataError(OsrkitError):
    """Persisted data is missing, truncated, or fails its checksum."""


class NumericalError(OsrkitError):
    """A numeric procedure diverged or produced non-finite values."""
