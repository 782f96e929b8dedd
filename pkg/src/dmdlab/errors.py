"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """A caller broke an operation's precondition."""


class NumericFailure(ArithmeticError):
    """A computation produced non-finite values or diverged."""

    def __init__(self, message: str, primitive: str | None = None, **context):
        super().__init__(message)
        self.primitive = primitive
        self.context = context


class UnsupportedOperation(NotImplementedError):
    pass


class SchemaError(ValueError):
    """A CSV or config file is missing a required field."""


class ConfigError(ValueError):
    pass
