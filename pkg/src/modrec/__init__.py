"""Radio modulation recognition on a small numpy autodiff engine."""

from .errors import (
    ConfigError,
    ContractError,
    FormatError,
    IoError,
    ModrecError,
    NumericsError,
    ShapeError,
    SizeError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "FormatError",
    "IoError",
    "ModrecError",
    "NumericsError",
    "ShapeError",
    "SizeError",
    "__version__",
]
