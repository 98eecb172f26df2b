class ContractError(ValueError):
    """An input violates a shape, length or range contract."""


class NumericError(ArithmeticError):
    """A tensor holds non-finite values."""

    def __init__(self, field: str, message: str | None = None) -> None:
        self.field = field
        super().__init__(message or f"Non-finite values in {field}")


class CorruptDatasetError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class UsageError(ValueError):
    pass
