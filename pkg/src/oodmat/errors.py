"""Exception types raised across the package."""


class OodmatError(Exception):
    """Base class for package errors."""


class ParseError(OodmatError, ValueError):
    """A dataset, descriptor or pass file could not be parsed."""


class ValidationError(OodmatError, ValueError):
    """Parsed data violates a documented invariant."""


class GeometryError(OodmatError, ValueError):
    """Degenerate or invalid lattice geometry."""


class ConfigError(OodmatError, ValueError):
    """Invalid configuration value."""


class DomainError(OodmatError, ValueError):
    """Argument outside the mathematical domain of a function."""


class GenerationError(OodmatError, RuntimeError):
    """Synthetic structure generation gave up."""


class TrainingError(OodmatError, RuntimeError):
    """Training diverged."""


class PipelineError(OodmatError, RuntimeError):
    """A benchmark stage failed; ``stage`` names it."""

    def __init__(self, stage, message):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
