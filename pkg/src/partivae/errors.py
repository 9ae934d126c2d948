"""Exception hierarchy shared by every module."""


class PartivaeError(Exception):
    pass


class DimensionError(PartivaeError, ValueError):
    pass


class NoiseError(PartivaeError, ValueError):
    pass


class ParameterError(PartivaeError, ValueError):
    pass


class CapacityError(PartivaeError):
    pass


class ConfigError(PartivaeError):
    pass


class DataError(PartivaeError):
    pass


class EvaluationError(PartivaeError, FloatingPointError):
    """A term of the bound came out non-finite."""

    def __init__(self, factor: str, detail: str = ""):
        self.factor = factor
        msg = f"non-finite value in {factor}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class TrainingError(PartivaeError, FloatingPointError):
    """Raised when an optimisation step produces a non-finite quantity."""

    def __init__(self, step: int, detail: str = "", snapshot=None):
        self.step = step
        self.snapshot = snapshot
        super().__init__(f"non-finite value at step {step}" + (f": {detail}" if detail else ""))
