"""Exception types shared across the library."""


class SrmbError(Exception):
    """Base class for all library errors."""


class ShapeError(SrmbError):
    """Operands have incompatible shapes."""


class DomainError(SrmbError):
    """A value is outside the domain an operation accepts."""


class ContractError(SrmbError):
    """An API contract was violated (wrong output kind, unregistered op)."""


class FormatError(SrmbError):
    """A file does not match its documented format."""


class VocabularyError(SrmbError):
    """An annotation uses a phase name missing from the vocabulary."""


class BudgetError(SrmbError):
    """The sampling budget cannot hold the mandatory keyframes."""


class TrainingError(SrmbError):
    """Training produced a non-finite loss or gradient."""


class CheckpointError(SrmbError):
    """A checkpoint is corrupt or inconsistent with the model."""


class UsageError(SrmbError):
    """Invalid command-line usage or run configuration."""
