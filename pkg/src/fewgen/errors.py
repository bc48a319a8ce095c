"""Exception types shared across the package."""


class FewgenError(Exception):
    """Base class for all package errors."""


class ConfigError(FewgenError):
    """Invalid configuration or violated precondition."""


class ShapeError(FewgenError):
    """Tensor shape inconsistent with the requested operation."""


class ShapeMismatchError(FewgenError):
    """Two collections that must agree in length/shape do not."""


class DomainError(FewgenError):
    """Numeric argument outside the mathematical domain."""


class ParseError(FewgenError):
    """Malformed or unreadable input file."""


class InsufficientDataError(FewgenError):
    """Not enough data to perform the requested operation."""


class SamplingError(FewgenError):
    """Sampler produced a non-finite intermediate state."""


class UnknownTokenError(FewgenError):
    """Token id not present in the embedding table."""


class TokenCollisionError(FewgenError):
    """Dataset name already has a registered token."""


class MissingEMAError(FewgenError):
    """Checkpoint does not carry EMA shadow parameters."""


class TrainingDivergedError(FewgenError):
    """Loss became non-finite during optimization."""


class NumericalError(FewgenError):
    """A numerical routine exceeded its accuracy budget."""


class SchemaError(FewgenError):
    """Structured file does not match the expected schema."""
