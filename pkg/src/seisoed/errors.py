"""Exception types shared across the package."""


class SeisOEDError(Exception):
    """Base class for package errors."""


class ConfigError(SeisOEDError, ValueError):
    """Invalid run configuration (exit code 2 on the command line)."""


class DomainError(SeisOEDError, ValueError):
    """Argument outside the admissible domain of an operation."""


class NumericalError(SeisOEDError, ArithmeticError):
    """Instability, singular matrix or other numerical failure (exit code 3)."""


class InstabilityError(NumericalError):
    def __init__(self, step: int):
        super().__init__(f"non-finite values in the wavefield at time step {step}")
        self.step = step


class UnidentifiableParameterError(NumericalError):
    def __init__(self, index: int):
        super().__init__(f"parameter {index} has a zero Hessian diagonal and is unidentifiable")
        self.index = index
