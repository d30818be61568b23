class SampleCertError(Exception):
    """Base class for all package errors."""


class ConfigError(SampleCertError):
    pass


class ParseError(SampleCertError):
    pass


class ShapeError(SampleCertError, ValueError):
    pass


class DomainError(SampleCertError, ValueError):
    pass


class TrainingError(SampleCertError):
    pass


class SearchFailure(SampleCertError):
    pass


class StoreError(SampleCertError):
    pass


class StageError(SampleCertError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
