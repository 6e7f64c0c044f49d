"""Exception types shared across the package.

Every domain failure raises a subclass of PhysAudioError so the CLI can map
them to exit code 1 with a machine-readable payload.
"""


class PhysAudioError(Exception):
    """Base class for all domain errors."""


class ParseError(PhysAudioError):
    """Input file is not syntactically valid."""


class ValidationError(PhysAudioError):
    """Input violates a structural invariant (names the offending field)."""


class EvaluationError(PhysAudioError):
    """A metric or measurement could not be computed."""


class DegenerateError(EvaluationError):
    """Correlation input is degenerate (constant sequence or too few events)."""


class TrainingError(PhysAudioError):
    """Training diverged (non-finite loss)."""


class SamplingError(PhysAudioError):
    """Sampler state became non-finite."""


class IoError(PhysAudioError):
    """Output could not be written."""
