"""Exception types shared across modules."""


class CapacityError(ValueError):
    """A request exceeds what a pool or an enumeration can supply."""


class HeadModeError(RuntimeError):
    """An operation was handed shared heads where per-class heads are needed, or vice versa."""


class FormatError(RuntimeError):
    """A binary pool or checkpoint file is malformed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
