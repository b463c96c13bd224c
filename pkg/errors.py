class TailSmoothError(Exception):
    """Base class for every error raised by the toolkit."""


class ValidationError(TailSmoothError, ValueError):
    """Input data or parameters violate a precondition."""


class MatrixFormatError(ValidationError):
    """A matrix or label file could not be decoded."""

    def __init__(self, path, message: str, position: str = ""):
        self.path = str(path)
        self.position = position
        where = f" at {position}" if position else ""
        super().__init__(f"{self.path}{where}: {message}")


class SingularPrototypeError(ValidationError):
    """A class prototype is missing or has zero norm."""

    def __init__(self, class_index: int, reason: str = "zero-norm prototype"):
        self.class_index = class_index
        super().__init__(f"class {class_index}: {reason}")


class RareClassUndefinedError(ValidationError):
    """Frequency modulation was asked for a class with no instances."""

    def __init__(self, class_index: int):
        self.class_index = class_index
        super().__init__(
            f"class {class_index} has zero instances; drop it before modulating similarities"
        )


class NumericalError(TailSmoothError, ArithmeticError):
    """A computation produced non-finite values."""


class TrainingDivergedError(NumericalError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
