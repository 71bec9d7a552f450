"""Exception types shared across the package."""


class KurtqError(Exception):
    pass


class DimensionError(KurtqError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(KurtqError, ValueError):
    """A distribution or quantization parameter is out of its valid range."""


class DegenerateTensorError(KurtqError, ValueError):
    pass


class ContractError(KurtqError, RuntimeError):
    pass


class InputError(KurtqError, ValueError):
    pass


class StateError(KurtqError, RuntimeError):
    """An operation was requested before the state it depends on exists."""


class FormatError(KurtqError, ValueError):
    """Malformed checkpoint file. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TrainingDivergenceError(KurtqError, FloatingPointError):
    def __init__(self, step, task_loss, kure_loss):
        super().__init__(
            f"non-finite loss at step {step}: task_loss={task_loss!r}, kure_loss={kure_loss!r}"
        )
        self.step = step
        self.task_loss = task_loss
        self.kure_loss = kure_loss
