"""Exception hierarchy shared by every module."""


class ModrecError(Exception):
    """Base class for all package errors."""


class SizeError(ModrecError, ValueError):
    pass


class ShapeError(ModrecError, ValueError):
    pass


class ConfigError(ModrecError, ValueError):
    pass


class ContractError(ModrecError, ValueError):
    pass


class NumericsError(ModrecError, ArithmeticError):
    def __init__(self, message, epoch=None):
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")
        self.epoch = epoch


class FormatError(ModrecError, ValueError):
    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class IoError(ModrecError, OSError):
    pass
