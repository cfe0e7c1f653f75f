class ContractViolation(ValueError):
    """A precondition of an operation was not met by the caller."""


class OracleFailure(ArithmeticError):
    pass


class ConfigurationError(ValueError):
    pass


class ScenarioParseError(ValueError):
    pass


class CheckpointError(IOError):
    pass


class NumericalGuardError(FloatingPointError):
    """Raised when an importance log-ratio leaves the guarded range."""

    def __init__(self, message: str, index: int, log_ratio: float):
        super().__init__(message)
        self.index = index
        self.log_ratio = log_ratio
