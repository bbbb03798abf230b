"""Exception hierarchy shared by every lpae module."""


class LPAEError(Exception):
    """Base class for all errors raised by lpae."""


class DegenerateInputError(LPAEError, ValueError):
    """Input too small (or otherwise degenerate) for the requested operation."""


class ShapeError(LPAEError, ValueError):
    """Operand shapes are inconsistent."""


class NonFiniteError(LPAEError, FloatingPointError):
    """A NaN or Inf appeared in a forward value or a gradient."""


class ArchitectureError(LPAEError, ValueError):
    """An architecture description cannot be realised as a network."""


class ArchSyntaxError(ArchitectureError):
    """Architecture text does not follow the layer grammar."""

    def __init__(self, message, line, column):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class CheckpointError(LPAEError):
    """Checkpoint or array file is corrupt, from another version, or mismatched."""


class FormatError(LPAEError, ValueError):
    """A dataset file does not follow its binary layout."""


class NumericError(LPAEError, ArithmeticError):
    """A linear-algebra routine failed to converge."""


class TrainingDiverged(LPAEError):
    """Training produced a non-finite loss; ``log`` holds the rows up to that point."""

    def __init__(self, message, log=None, checkpoint=None):
        super().__init__(message)
        self.log = log
        self.checkpoint = checkpoint
