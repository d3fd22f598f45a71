"""Exception hierarchy shared by all chartflow modules."""


class ChartflowError(Exception):
    """Base class for all chartflow errors."""


class ConfigError(ChartflowError, ValueError):
    """Invalid configuration value or malformed configuration document.

    ``field`` names the offending key, ``line`` the 1-based line number
    in the source document when known.
    """

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        prefix = []
        if line is not None:
            prefix.append(f"line {line}")
        if field is not None:
            prefix.append(f"field '{field}'")
        if prefix:
            message = f"{', '.join(prefix)}: {message}"
        super().__init__(message)


class GeometryError(ChartflowError, ValueError):
    """Atlas or chart construction failed a structural check."""


class NumericalError(ChartflowError, RuntimeError):
    """A numerical step failed.

    The scheme coordinates ``(l, m, p, chart)`` of the failure are kept on
    the exception so callers can report where the run broke down.
    """

    def __init__(self, message, l=None, m=None, p=None, chart=None):
        self.l, self.m, self.p, self.chart = l, m, p, chart
        coords = [f"{k}={v}" for k, v in (("l", l), ("m", m), ("p", p), ("chart", chart))
                  if v is not None]
        if coords:
            message = f"{message} [{', '.join(coords)}]"
        super().__init__(message)


class ContractionError(NumericalError):
    """The p-subiteration stopped contracting."""


class StagnationError(NumericalError):
    """The m-iteration stopped making progress."""
