"""Exception hierarchy shared across the package."""


class MigenError(Exception):
    """Base class for all package errors."""


class ShapeError(MigenError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(MigenError, ValueError):
    """A configuration value is invalid or infeasible."""


class InputError(MigenError, ValueError):
    """Caller supplied data that violates an operation's precondition."""


class ContractError(MigenError, RuntimeError):
    """An operation was invoked outside its contract."""


class FormatError(MigenError, ValueError):
    """An on-disk artifact is malformed or inconsistent with its header."""


class BagIOError(MigenError, OSError):
    """A bag file is missing or unreadable."""


class TrainingDiverged(MigenError, RuntimeError):
    """Loss or gradients became non-finite during training."""
