from typing import Optional


class LabError(Exception):
    pass


class EmptyInputError(LabError, ValueError):
    pass


class DimensionError(LabError, ValueError):
    pass


class ConfigurationError(LabError, ValueError):
    pass


class PartitionError(LabError, ValueError):
    pass


class DegenerateDesignError(LabError, ValueError):
    pass


class CosineUndefinedError(LabError, ValueError):
    pass


class MissingClError(LabError, KeyError):

    def __init__(self, key: object) -> None:
        super().__init__(key)

        self.key = key

    def __str__(self) -> str:
        return f"No natural representation carries the variable values {self.key}."


class MissingClassError(LabError, KeyError):

    def __init__(self, label: object) -> None:
        super().__init__(label)

        self.label = label

    def __str__(self) -> str:
        return f"No natural samples were given for class {self.label}."


class SingularSystemError(LabError, ArithmeticError):
    pass


class ConvergenceError(LabError, ArithmeticError):

    def __init__(self, message: str, residual: float, iterations: int) -> None:
        super().__init__(message)

        self.residual = residual
        self.iterations = iterations


class ModeError(LabError, RuntimeError):
    pass


def check_dimension(name: str, actual: int, expected: int, what: Optional[str] = None) -> None:
    if actual != expected:
        raise DimensionError(f"{name} has {actual} {what or 'dimensions'} but {expected} were expected.")
