"""Exception hierarchy shared by every module of the toolkit."""


class AICSDError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(AICSDError, ValueError):
    pass


class InvalidInputError(AICSDError, ValueError):
    pass


class InvalidLabelError(AICSDError, ValueError):
    pass


class DegenerateBatchError(AICSDError, ValueError):
    """Raised when a loss would average over zero labelled pixels."""


class DegenerateEvaluationError(AICSDError, ValueError):
    """Raised when metrics are requested from an empty confusion matrix."""


class ScheduleError(AICSDError, ValueError):
    pass


class ConfigurationError(AICSDError, ValueError):
    pass


class CheckpointError(AICSDError):
    pass


class IngestionError(AICSDError):
    pass


class NonFiniteLossError(AICSDError, FloatingPointError):
    """Training aborted because a loss component became NaN or Inf."""

    def __init__(self, component, epoch, step):
        self.component = component
        self.epoch = epoch
        self.step = step
        super().__init__(
            f"non-finite value in loss component '{component}' "
            f"(epoch {epoch}, step {step})"
        )
