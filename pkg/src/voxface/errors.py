class VoxfaceError(Exception):
    pass


class AlignmentError(VoxfaceError, ValueError):
    pass


class ShapeError(VoxfaceError, ValueError):
    pass


class ConfigError(VoxfaceError, ValueError):
    pass


class MissingDependencyError(VoxfaceError):
    """An upstream stage artifact (checkpoint, dataset) is not available."""


class NumericalError(VoxfaceError, FloatingPointError):
    """Raised when a training loss becomes non-finite."""

    def __init__(self, step, term="loss", value=float("nan")):
        self.step = step
        self.term = term
        self.value = value
        super().__init__(f"non-finite {term} ({value}) at step {step}")
