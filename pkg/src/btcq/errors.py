"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible or malformed shapes."""


class DomainError(ValueError):
    """A value lies outside the domain an operation requires."""


class ConfigError(ValueError):
    """A configuration parameter is out of its allowed range."""


class IntegrityError(RuntimeError):
    """Stored metadata and payload disagree (corrupt or inconsistent state)."""


class SingularTransformError(RuntimeError):
    """A transform factor is singular or too ill-conditioned to invert."""


class ContainerError(ValueError):
    """Base class for container (de)serialization failures."""


class BadMagicError(ContainerError):
    """File does not start with the expected magic bytes."""


class UnsupportedVersionError(ContainerError):
    """File declares a version this reader does not understand."""


class TruncatedError(ContainerError):
    """File ends before a declared section is complete."""


class CorruptIndexError(ContainerError):
    """A stored codebook index is out of range."""
