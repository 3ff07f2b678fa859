"""Exception types shared across the package."""


class EmorecError(Exception):
    """Base class for all package errors."""


class ShapeError(EmorecError, ValueError):
    """Operands have incompatible shapes."""


class ConfigError(EmorecError, ValueError):
    """Invalid or unsupported configuration."""


class DegenerateMaskError(ConfigError):
    """Mask ratio rounds to keeping or dropping every patch."""


class ContractError(EmorecError, ValueError):
    """A call violated an operation's precondition."""


class CoverageError(ContractError):
    """Reassembly input leaves at least one frame uncovered."""


class UndefinedStatisticError(EmorecError, ValueError):
    """Statistic has a zero denominator (e.g. CCC of two equal constants)."""


class EmptyBatchError(EmorecError, ValueError):
    """Every element of a batch is masked out."""


class AnnotationError(EmorecError, ValueError):
    """Malformed annotation file; carries file path and line number."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(loc + message)
        self.path = path
        self.line = line


class DivergenceError(EmorecError, RuntimeError):
    """Training produced NaN loss or gradients."""
