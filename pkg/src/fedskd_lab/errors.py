"""Exception hierarchy shared by every module of the package."""


class FedSKDError(Exception):
    """Base class for all errors raised by fedskd_lab."""


class NonFiniteError(FedSKDError, ValueError):
    pass


class ZeroRowError(FedSKDError, ValueError):
    """A feature vector is exactly zero, so its similarity row cannot be normalized."""


class ShapeRankError(FedSKDError, ValueError):
    pass


class EmptyRegionError(FedSKDError, ValueError):
    pass


class MismatchError(FedSKDError, ValueError):
    pass


class MissingMasksError(FedSKDError, ValueError):
    pass


class UnsupportedShapeError(FedSKDError, ValueError):
    pass


class WidthUnderflowError(FedSKDError, ValueError):
    pass


class EmptyClientError(FedSKDError, RuntimeError):
    pass


class UnknownSiteError(FedSKDError, KeyError):
    pass


class NonFiniteLossError(FedSKDError, FloatingPointError):
    """Training produced a NaN/Inf loss; carries diagnostics for the report."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SchemaMismatchError(FedSKDError, ValueError):
    pass


class SingleClassError(FedSKDError, ValueError):
    pass


class MissingAttrError(FedSKDError, ValueError):
    pass


class ConfigError(FedSKDError, ValueError):
    """Invalid experiment configuration. ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
