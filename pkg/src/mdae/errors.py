"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor dimensions do not satisfy an operation's requirements."""


class ContractError(RuntimeError):
    """A precondition or usage contract was violated (stale cache, missing stats, ...)."""


class FormatError(ValueError):
    """A binary file could not be decoded."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingAborted(RuntimeError):
    """Training hit a non-finite loss. Carries whatever was salvaged."""

    def __init__(self, message: str, checkpoint=None, history=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.history = history if history is not None else []
