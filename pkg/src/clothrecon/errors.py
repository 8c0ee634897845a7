"""Exception hierarchy shared by all modules."""


class ClothReconError(Exception):
    """Base class for every error raised by this package."""


class DegenerateFace(ClothReconError, ValueError):
    pass


class IndexOutOfRange(ClothReconError, IndexError):
    pass


class BehindCamera(ClothReconError, ValueError):
    pass


class NonPositiveDensity(ClothReconError, ValueError):
    pass


class ShapeMismatch(ClothReconError, ValueError):
    pass


class SolverDiverged(ClothReconError, RuntimeError):
    def __init__(self, message, residual=None, iterations=None, iteration=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
        # optimizer iteration during which the failure happened, when known
        self.iteration = iteration


class NaNDetected(ClothReconError, FloatingPointError):
    pass


class TapeMismatch(ClothReconError, ValueError):
    pass


class NonFiniteEnergy(ClothReconError, FloatingPointError):
    pass


class EmptyCloud(ClothReconError, ValueError):
    pass


class DegenerateConfiguration(ClothReconError, ValueError):
    pass


class MissingFile(ClothReconError, FileNotFoundError):
    def __init__(self, path, message=None):
        super().__init__(message or f"missing required file or directory: {path}")
        self.path = str(path)


class CountMismatch(ClothReconError, ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = str(path)


class ParseError(ClothReconError, ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = str(path)
