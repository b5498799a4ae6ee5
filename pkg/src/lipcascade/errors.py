"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class LengthError(ValueError):
    """A sequence is too short (or empty) for the operation."""


class AlignmentError(ValueError):
    """Parallel sequences that must be aligned have different lengths."""


class ParseError(ValueError):
    """Malformed text input (pinyin token, corpus line, ...)."""


class VocabError(ValueError):
    """Token missing from a closed vocabulary."""


class SpecError(ValueError):
    """Synthetic-data specification is internally inconsistent."""


class ConfigError(ValueError):
    """Bad run configuration (unknown key, type mismatch, contract violation)."""


class FormatError(ValueError):
    """Corrupt or incompatible serialized file (checkpoint, frame file)."""


class UndefinedRateError(ZeroDivisionError):
    """Error rate requested over an empty reference."""
