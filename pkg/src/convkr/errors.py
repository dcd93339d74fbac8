"""Exception types shared across the package."""


class ConvKRError(Exception):
    """Base class for all package errors."""


class DimensionError(ConvKRError, ValueError):
    pass


class ConfigurationError(ConvKRError, ValueError):
    pass


class TrainingError(ConvKRError, RuntimeError):
    pass


class CheckError(ConvKRError, RuntimeError):
    """Raised by the gradient checker when the loss closure is not deterministic."""


class ParseError(ConvKRError, ValueError):
    pass


class ValidationError(ConvKRError, ValueError):
    pass


class WindowError(ConvKRError, ValueError):
    pass


class EvaluationError(ConvKRError, ValueError):
    pass


class NumericalError(ConvKRError, ArithmeticError):
    pass


class InferenceError(ConvKRError, RuntimeError):
    pass


class StageError(ConvKRError, RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage
