class MdlError(Exception):
    """Base class for all lab errors."""


class InvalidShapeError(MdlError, ValueError):
    pass


class InvalidConfigError(MdlError, ValueError):
    pass


class InvalidMaskError(MdlError, ValueError):
    pass


class ContractViolationError(MdlError, ValueError):
    pass


class DegenerateMaskError(MdlError, ValueError):
    pass


class OutOfDomainError(MdlError, ValueError):
    pass


class PropagationError(MdlError, FloatingPointError):
    """A callable returned non-finite values."""


class DivergedTrainingError(MdlError, RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"training diverged at iteration {iteration} (loss={loss})")
        self.iteration = iteration
        self.loss = loss


class MissingAttentionError(MdlError, ValueError):
    pass


class UndefinedMetricError(MdlError, ValueError):
    def __init__(self, metric: str, reason: str = "test set holds a single class"):
        super().__init__(f"{metric} is undefined: {reason}")
        self.metric = metric
