from typing import Any, Callable, Dict, Optional, Type

from pocketdiff.api.dependencies.response import error_response
from pocketdiff.core.config import Config


class BaseAppException(Exception):
    """Custom base exception for our app"""
    module: str = "app"
    kind: str = "error"

    def __init__(self, message: Optional[str] = None, errors: Optional[Dict[str, Any]] = None):
        self.message = message or f"An error occurred in {Config.APP_NAME}"
        self.errors = errors or {}
        super().__init__(self.message)


# tensor_autodiff

class ShapeMismatchError(BaseAppException):
    """Raised when operand shapes do not conform for a primitive."""
    module = "tensor_autodiff"
    kind = "shape"

    def __init__(self, message: str = "Shape mismatch", errors: Optional[Dict[str, Any]] = None):
        super().__init__(message, errors)


class NonFiniteError(BaseAppException):
    """Raised when a forward operation produces NaN or Inf."""
    module = "tensor_autodiff"
    kind = "non_finite"

    def __init__(self, message: str = "Non-finite value produced", errors: Optional[Dict[str, Any]] = None):
        super().__init__(message, errors)


class NonScalarLossError(BaseAppException):
    """Raised when backward() is called on a tensor with more than one element."""
    module = "tensor_autodiff"
    kind = "non_scalar_loss"

    def __init__(self, message: str = "Loss must be a scalar", errors: Optional[Dict[str, Any]] = None):
        super().__init__(message, errors)


class EmptyTapeError(BaseAppException):
    """Raised when backward() runs against a tape that recorded nothing."""
    module = "tensor_autodiff"
    kind = "empty_tape"

    def __init__(self, message: str = "Tape is empty", errors: Optional[Dict[str, Any]] = None):
        super().__init__(message, errors)


# schedules

class ScheduleError(BaseAppException):
    """Raised for invalid noise schedule or annealing parameters."""
    module = "schedules"
    kind = "invalid"

    def __init__(self, message: str = "Invalid schedule", errors: Optional[Dict[str, Any]] = None):
        super().__init__(message, errors)


class UnknownAnnealKindError(ScheduleError):
    kind = "unknown_kind"

    def __init__(self, message: str = "Unknown annealing curve", errors: Optional[Dict[str, Any]] = None):
        super().__init__(message, errors)


# diffusion

class TimestepRangeError(BaseAppException):
    """Raised when a timestep falls outside the schedule."""
    module = "diffusion"
    kind = "timestep_range"

    def __init__(self, message: str = "Timestep out of range", errors: Optional[Dict[str, Any]] = None):
        super().__init__(message, errors)


class InvalidDistributionError(BaseAppException):
    """Raised when probability rows are malformed (negative, zero-sum, not one-hot)."""
    module = "diffusion"
    kind = "invalid_distribution"

    def __init__(self, message: str = "Invalid probability rows", errors: Optional[Dict[str, Any]] = None):
        super().__init__(message, errors)


class InfiniteDivergenceError(BaseAppException):
    """Raised when KL(p||q) is infinite because q vanishes where p does not."""
    module = "diffusion"
    kind = "infinite_divergence"

    def __init__(self, message: str = "KL divergence is infinite", errors: Optional[Dict[str, Any]] = None):
        super().__init__(message, errors)


# denoiser

class DenoiserShapeError(BaseAppException):
    """Raised when inputs disagree with the network's configured dimensions."""
    module = "denoiser"
    kind = "shape"

    def __init__(self, message: str = "Input does not match denoiser dimensions", errors: Optional[Dict[str, Any]] = None):
        super().__init__(message, errors)


class CheckpointError(BaseAppException):
    """Raised for unreadable, unversioned or shape-inconsistent checkpoints."""
    module = "denoiser"
    kind = "checkpoint"

    def __init__(self, message: str = "Checkpoint error", errors: Optional[Dict[str, Any]] = None):
        super().__init__(message, errors)


# trainer

class EmptyProteinError(BaseAppException):
    module = "trainer"
    kind = "empty_protein"

    def __init__(self, message: str = "Protein context has no atoms", errors: Optional[Dict[str, Any]] = None):
        super().__init__(message, errors)


class TrainingDivergedError(BaseAppException):
    """Raised when a training step yields a non-finite loss; errors carries the diagnostic record."""
    module = "trainer"
    kind = "non_finite_loss"

    def __init__(self, message: str = "Training loss is not finite", errors: Optional[Dict[str, Any]] = None):
        super().__init__(message, errors)


# sampler

class SamplingDivergedError(BaseAppException):
    module = "sampler"
    kind = "non_finite_positions"

    def __init__(self, message: str = "Sampled positions are not finite", errors: Optional[Dict[str, Any]] = None):
        super().__init__(message, errors)


class EmptyStatsError(BaseAppException):
    module = "sampler"
    kind = "empty_stats"

    def __init__(self, message: str = "Atom count statistics are empty", errors: Optional[Dict[str, Any]] = None):
        super().__init__(message, errors)


# evalkit

class BinningMismatchError(BaseAppException):
    module = "evalkit"
    kind = "binning"

    def __init__(self, message: str = "Histograms use different bins", errors: Optional[Dict[str, Any]] = None):
        super().__init__(message, errors)


class EmptySetError(BaseAppException):
    module = "evalkit"
    kind = "empty_set"

    def __init__(self, message: str = "Molecule set is empty", errors: Optional[Dict[str, Any]] = None):
        super().__init__(message, errors)


# dataio

class XYZFormatError(BaseAppException):
    """Raised for malformed XYZ files; the message names the offending line."""
    module = "dataio"
    kind = "xyz_format"

    def __init__(self, message: str = "Malformed XYZ file", errors: Optional[Dict[str, Any]] = None):
        super().__init__(message, errors)


class CorpusError(BaseAppException):
    module = "dataio"
    kind = "corpus"

    def __init__(self, message: str = "Corpus error", errors: Optional[Dict[str, Any]] = None):
        super().__init__(message, errors)


# cli

class ConfigKeyError(BaseAppException):
    """Raised for unknown or malformed configuration keys."""
    module = "cli"
    kind = "config"

    def __init__(self, message: str = "Invalid configuration", errors: Optional[Dict[str, Any]] = None):
        super().__init__(message, errors)


class OutputDirError(BaseAppException):
    module = "cli"
    kind = "output_dir"

    def __init__(self, message: str = "Output directory is not usable", errors: Optional[Dict[str, Any]] = None):
        super().__init__(message, errors)


# experiment

class ExperimentCheckError(BaseAppException):
    """Raised when a finished experiment misses one of its acceptance checks."""
    module = "experiment"
    kind = "check"

    def __init__(self, message: str = "Experiment checks failed", errors: Optional[Dict[str, Any]] = None):
        super().__init__(message, errors)


ExceptionHandler = Callable[[BaseAppException], int]

_exception_handlers: Dict[Type[BaseAppException], ExceptionHandler] = {}


def create_exception_handler(
    exit_code: int,
    default_message: str
) -> ExceptionHandler:
    def exception_handler(exc: BaseAppException) -> int:
        message = getattr(exc, "message", None) or default_message
        errors = getattr(exc, "errors", {})
        error_response(
            module=exc.module,
            kind=exc.kind,
            message=message,
            errors=errors,
        )
        return exit_code
    return exception_handler


def add_exception_handler(exc_class: Type[BaseAppException], handler: ExceptionHandler) -> None:
    _exception_handlers[exc_class] = handler


def dispatch_exception(exc: BaseAppException) -> int:
    """Route an exception to the most specific registered handler and return its exit code."""
    for cls in type(exc).__mro__:
        handler = _exception_handlers.get(cls)
        if handler is not None:
            return handler(exc)
    return create_exception_handler(1, "Unexpected error")(exc)
