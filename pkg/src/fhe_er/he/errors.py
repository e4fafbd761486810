from .params import ParameterError


class HeError(Exception):
    """Base class for scheme failures other than bad parameters."""


class EncodingError(HeError, ValueError):
    pass


class IncompatibleError(HeError, ValueError):
    """Operands disagree on parameters, level or scale."""


class DepthError(HeError):
    """Not enough levels left for the requested operation."""

    def __init__(self, msg, required=None, available=None):
        super().__init__(msg)
        self.required = required
        self.available = available


class MissingKeyError(HeError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "missing key"


class FormatError(HeError, ValueError):
    """Malformed or foreign serialized object."""


__all__ = ["ParameterError", "HeError", "EncodingError", "IncompatibleError",
           "DepthError", "MissingKeyError", "FormatError"]
