"""Exception taxonomy shared by every motionkit module."""


class MotionKitError(Exception):
    """Base class for all structured motionkit errors."""


class ShapeError(MotionKitError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(MotionKitError):
    """A numeric guard fired (non-finite input, overflow, ...)."""


class DomainError(MotionKitError):
    """Input is outside the mathematical domain of the operation."""


class ContractError(MotionKitError):
    """A call-sequence or argument contract was violated."""


class DegeneracyError(MotionKitError):
    """Input is degenerate (rank-deficient basis, empty mask, zero row, ...)."""


class ConfigError(MotionKitError):
    """Invalid configuration or generator parameters."""


class TokenizationError(MotionKitError):
    """Image cannot be tokenized (size not divisible by patch size)."""


class FormatError(MotionKitError):
    """Malformed file content (bad magic, truncated payload, bad CRC)."""


class TaskError(MotionKitError):
    """Checkpoint task does not match the requested operation."""


class TrainingDivergedError(MotionKitError):
    """Training loss became non-finite; carries step diagnostics."""
