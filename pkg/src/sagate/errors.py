"""Exception hierarchy shared by every subsystem."""


class SAGateError(Exception):
    """Base class for all library errors."""


class ShapeMismatch(SAGateError, ValueError):
    pass


class NonFinite(SAGateError, FloatingPointError):
    pass


class NotScalar(SAGateError, ValueError):
    pass


class DetachedRoot(SAGateError, RuntimeError):
    pass


class DegenerateOutput(SAGateError, ValueError):
    pass


class UnknownVariant(SAGateError, KeyError):
    pass


class NoGateEnabled(SAGateError, ValueError):
    pass


class AllInvalid(SAGateError, ValueError):
    pass


class NonPositiveDepth(SAGateError, ValueError):
    pass


class RecipeInfeasible(SAGateError, RuntimeError):
    pass


class AllIgnored(SAGateError, ValueError):
    pass


class EmptyMatrix(SAGateError, ValueError):
    pass


class Divergence(SAGateError, FloatingPointError):
    pass


class ConfigError(SAGateError, ValueError):
    """Config parse/validation failure. ``line`` is 1-based when known."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
