"""Exception hierarchy shared by all pipeline stages.

Each category maps to a distinct CLI exit code (see cli.EXIT_CODES).
"""


class MadetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MadetError):
    """Tensor shapes do not satisfy an operation's contract."""

    def __init__(self, message, *shapes):
        if shapes:
            message = f"{message}: {' vs '.join(str(tuple(s)) for s in shapes)}"
        super().__init__(message)


class SpecError(MadetError):
    """A network specification is malformed or its shape chain underflows."""


class FormatError(MadetError):
    """A file has the wrong magic, encoding, or field layout."""


class ParseError(FormatError):
    """A text file failed to parse; carries the offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(MadetError):
    """Data violates a declared invariant (bounds, uniqueness, masks)."""


class DataError(MadetError):
    """A dataset cannot supply what a sampler or trainer needs."""


class GenerationError(MadetError):
    """Synthetic data generation could not satisfy placement constraints."""


class ConfigError(MadetError):
    """A configuration key is unknown, unparsable, or out of range."""


class PipelineOrderError(MadetError):
    """A stage was invoked before the stages it depends on produced output."""


class DivergenceError(MadetError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, batch, value):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")


class UndefinedMetricError(MadetError):
    """A metric is undefined for the given counts (e.g. no ground truth)."""
