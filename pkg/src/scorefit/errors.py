"""Exception hierarchy shared by all modules."""


class ScoreFitError(Exception):
    """Base class for every error raised by the package."""


class DegenerateInput(ScoreFitError, ValueError):
    pass


class NotARotation(ScoreFitError, ValueError):
    pass


class DimensionMismatch(ScoreFitError, ValueError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


class FormatError(ScoreFitError, ValueError):
    pass


class InvariantViolation(ScoreFitError, ValueError):
    pass


class BehindCamera(ScoreFitError, ValueError):
    def __init__(self, indices):
        self.indices = [int(i) for i in indices]
        super().__init__(f"points behind camera at indices {self.indices}")


class InvalidStep(ScoreFitError, ValueError):
    pass


class TooFewViews(ScoreFitError, ValueError):
    pass


class TooFewFrames(ScoreFitError, ValueError):
    pass


class NonFinite(ScoreFitError, FloatingPointError):
    def __init__(self, message, iteration=None):
        self.iteration = iteration
        super().__init__(message)


class DegenerateConfiguration(ScoreFitError, ValueError):
    pass


class ConfigError(ScoreFitError, ValueError):
    pass
