"""Exception types shared across the pipeline."""


class AvatarForgeError(Exception):
    """Base class for all library errors."""


class InvalidInputError(AvatarForgeError, ValueError):
    """An argument violates a documented precondition."""


class InvalidStateError(AvatarForgeError, RuntimeError):
    """An operation was called before its required state existed."""


class CropFailureError(AvatarForgeError):
    """Face cropping removed every triangle."""


class EmptyCorrespondenceError(AvatarForgeError):
    """No landmark ray hit the mesh; fitting cannot proceed."""


class NonConvergenceError(AvatarForgeError):
    """An iterative solve failed to reduce its residual.

    Carries the partial fit report so callers can inspect the trace.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class TrainingDivergedError(AvatarForgeError):
    """Training hit a non-finite loss; carries a diagnostic snapshot."""

    def __init__(self, message, step=None, sample_id=None):
        super().__init__(message)
        self.step = step
        self.sample_id = sample_id
