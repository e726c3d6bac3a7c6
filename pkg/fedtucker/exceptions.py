"""
Exception hierarchy for fedtucker

Every error raised by the library derives from FedTuckerError and, where it
makes sense, from the matching builtin so callers can catch either.
"""


class FedTuckerError(Exception):
    """Base class for all fedtucker errors"""


class ModeIndexError(FedTuckerError, IndexError):
    """Mode index outside the tensor's dimensions"""


class ShapeMismatchError(FedTuckerError, ValueError):
    """Operands have incompatible shapes"""


class RankError(FedTuckerError, ValueError):
    """Requested rank is not valid for the operand"""


class NonFiniteError(FedTuckerError, ValueError):
    """NaN or infinite values where finite ones are required"""


class GeometryError(FedTuckerError, ValueError):
    """Invalid scanning geometry, phantom size or degenerate operator"""


class MalformedBlobError(FedTuckerError, ValueError):
    """A CSR blob failed structural validation"""


class InvalidArgumentError(FedTuckerError, ValueError):
    """Scalar argument or file content outside its valid domain"""


class UnsupportedConfigurationError(FedTuckerError, ValueError):
    """A combination of options the engine cannot run"""


class ConfigError(FedTuckerError, ValueError):
    """
    Configuration parse or validation failure

    Attributes:
        line: 1-based line number of the offending entry, if known
        problems: list of individual problem descriptions
    """

    def __init__(self, message, line=None, problems=None):
        self.line = line
        self.problems = list(problems) if problems else [message]
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
