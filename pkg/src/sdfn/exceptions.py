"""Exception hierarchy shared by every sdfn module."""


class SDFNError(Exception):
    pass


class ShapeError(SDFNError, ValueError):
    pass


class ConfigError(SDFNError, ValueError):
    pass


class NumericsError(SDFNError, ArithmeticError):
    pass


class InvariantError(SDFNError):
    pass


class VocabError(SDFNError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ParseError(SDFNError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class EvalError(SDFNError):
    pass


class ChurnUndefined(SDFNError):
    """Raised when two routing snapshots share no query ids."""
