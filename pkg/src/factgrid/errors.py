"""Exception types shared across the package.

Every error raised on purpose derives from FactgridError so callers (and the
CLI exit-code mapping) can distinguish deliberate failures from bugs.
"""


class FactgridError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FactgridError, ValueError):
    """Operand dimensions do not chain; the message names both shapes."""


class MaskError(FactgridError, ValueError):
    """A boolean mask has no admissible entry."""


class TargetError(FactgridError, ValueError):
    """A target label is out of range or masked out (e.g. an unseen pair used
    as a training label)."""


class RangeError(FactgridError, ValueError):
    """A scalar argument is outside its documented range."""


class VocabError(FactgridError, ValueError):
    """Vocabulary construction failed or a word is not in the vocabulary."""


class ParseError(FactgridError, ValueError):
    """A text file does not conform to its format; carries a line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(FactgridError, ValueError):
    """A configuration value or combination is invalid."""


class QueryError(FactgridError, ValueError):
    """An evaluation or retrieval query is invalid or unsupported by the
    model kind (e.g. a flat classifier asked about an unseen pair)."""


class CompatError(FactgridError, ValueError):
    """Checkpoint and dataset (or two reports) do not belong together."""
